//! Target-task adaptation: full-data training with early stopping, the
//! fixed-step few-shot protocol, and the seeded few-shot sweep.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::backbone::{BackboneCheckpoint, BoundBackbone, BoundLora, Example};
use crate::corpus::TaskData;
use crate::distillery::Distilled;
use crate::error::{Error, Result};
use crate::metrics::{mean_std, score_outputs, EvalOutcome, MetricName};
use crate::ndtensor::{kernels, Graph, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::promptkit::{compose_target_var, init_target_adapter, SharedMetaPrompt, TargetAdapter};
use crate::seeds;
use crate::taskforge::TaskType;

pub use crate::baselines::{AnyTunable, Method};

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub batch: usize,
    pub fewshot_steps: usize,
    pub fewshot_batch_cap: usize,
    pub k_set: Vec<usize>,
    pub n_draws: usize,
    pub seed: u64,
    pub max_new: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            max_epochs: 10,
            lr: 0.01,
            patience: 2,
            batch: 32,
            fewshot_steps: 50,
            fewshot_batch_cap: 8,
            k_set: vec![0, 1, 5, 10, 20],
            n_draws: 10,
            seed: 1000,
            max_new: 64,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws == 0 {
            return Err(Error::contract("n_draws must be at least 1"));
        }
        if self.batch == 0 || self.fewshot_batch_cap == 0 {
            return Err(Error::contract("batch sizes must be positive"));
        }
        Ok(())
    }
}

/// Parameters recorded on a graph for one method.
pub struct Binding {
    pub backbone: BoundBackbone,
    pub prompt: Option<Var>,
    pub lora: Option<BoundLora>,
    /// Gradient-carrying leaves, parallel to [`Tunable::trainable`].
    pub params: Vec<Var>,
}

/// A trainable parametrization of the frozen backbone's behaviour.
pub trait Tunable: Clone + Send + Sync {
    fn method(&self) -> Method;

    fn trainable(&self) -> Vec<&Tensor>;

    fn trainable_mut(&mut self) -> Vec<&mut Tensor>;

    /// The backbone this method runs on.
    fn backbone<'a>(&'a self, shared: &'a BackboneCheckpoint) -> &'a BackboneCheckpoint {
        shared
    }

    fn bind(&self, g: &mut Graph, shared: &BackboneCheckpoint) -> Result<Binding>;

    /// Learning rate used by this method.
    fn lr(&self, cfg: &AdaptConfig) -> f64 {
        cfg.lr
    }

    fn trainable_scalars(&self) -> usize {
        self.trainable().iter().map(|t| t.numel()).sum()
    }

    /// Serialized trainable state, used to compare adapters byte for byte.
    fn state_bytes(&self) -> Vec<u8> {
        self.trainable().iter().flat_map(|t| t.to_bytes()).collect()
    }
}

/// MPT target adaptation: `P*` frozen, only `u_t` and `v_t` train.
#[derive(Clone, Debug, PartialEq)]
pub struct MptTunable {
    pub p_star: Tensor,
    pub adapter: TargetAdapter,
}

impl MptTunable {
    pub fn new(meta: &SharedMetaPrompt, adapter: TargetAdapter) -> Self {
        let mut p_star = meta.p_star.clone();
        p_star.set_requires_grad(false);
        let mut adapter = adapter;
        adapter.u.set_requires_grad(true);
        adapter.v.set_requires_grad(true);
        MptTunable { p_star, adapter }
    }

    /// Stage-3 initialization from the matching source factors.
    pub fn init(distilled: &Distilled, task: &TaskData, seed: u64) -> Result<Self> {
        let factors = distilled.factors_for(task.task_type)?;
        let (adapter, _) =
            init_target_adapter(factors, &task.dataset_id, seeds::mix_str(seed, "mpt-init"))?;
        Ok(Self::new(&distilled.meta, adapter))
    }
}

impl Tunable for MptTunable {
    fn method(&self) -> Method {
        Method::Mpt
    }

    fn trainable(&self) -> Vec<&Tensor> {
        vec![&self.adapter.u, &self.adapter.v]
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.adapter.u, &mut self.adapter.v]
    }

    fn bind(&self, g: &mut Graph, shared: &BackboneCheckpoint) -> Result<Binding> {
        let backbone = shared.bind(g, false);
        let p = g.constant(self.p_star.shape(), self.p_star.data().to_vec())?;
        let u = g.leaf(&self.adapter.u);
        let v = g.leaf(&self.adapter.v);
        let prompt = compose_target_var(g, p, u, v)?;
        Ok(Binding {
            backbone,
            prompt: Some(prompt),
            lora: None,
            params: vec![u, v],
        })
    }
}

fn bound_ce(
    g: &mut Graph,
    ck: &BackboneCheckpoint,
    b: &Binding,
    examples: &[&Example],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(examples.len());
    for ex in examples {
        let s = ck.forward_with_prompt(
            g,
            &b.backbone,
            b.prompt,
            &ex.input_ids,
            &ex.target_ids,
            b.lora.as_ref(),
        )?;
        terms.push(g.cross_entropy(s.logits, &s.next_ids, &s.loss_mask)?);
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / examples.len() as f32))
}

pub fn new_optimizer<T: Tunable>(t: &T, cfg: &AdaptConfig) -> AdamW {
    AdamW::new(AdamWConfig::with_lr(t.lr(cfg)), &t.trainable())
}

/// One optimizer step on `batch`; returns the batch loss before the update.
pub fn train_step<T: Tunable>(
    t: &mut T,
    shared: &BackboneCheckpoint,
    opt: &mut AdamW,
    batch: &[&Example],
) -> Result<f64> {
    let (value, grads, vars) = {
        let mut g = Graph::new();
        let b = t.bind(&mut g, shared)?;
        let loss = bound_ce(&mut g, t.backbone(shared), &b, batch)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} training loss became {value}",
                t.method()
            )));
        }
        (value, g.backward(loss)?, b.params)
    };
    let mut params = t.trainable_mut();
    for (v, p) in vars.iter().zip(params.iter_mut()) {
        grads.absorb_into(*v, p)?;
    }
    opt.step(&mut params)?;
    Ok(value)
}

/// Mean per-example cross-entropy.
pub fn eval_loss<T: Tunable>(
    t: &T,
    shared: &BackboneCheckpoint,
    examples: &[Example],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("loss over an empty split"));
    }
    let mut g = Graph::new();
    let b = t.bind(&mut g, shared)?;
    let ck = t.backbone(shared);
    let mark = g.len();
    let mut sum = 0.0;
    for ex in examples {
        let loss = bound_ce(&mut g, ck, &b, &[ex])?;
        sum += g.scalar(loss) as f64;
        g.truncate(mark);
    }
    Ok(sum / examples.len() as f64)
}

/// Greedy continuation of each input; stops at `<eos>` or `max_new`.
pub fn generate_all<T: Tunable>(
    t: &T,
    shared: &BackboneCheckpoint,
    inputs: &[&[usize]],
    max_new: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut g = Graph::new();
    let b = t.bind(&mut g, shared)?;
    let ck = t.backbone(shared);
    let l = b.prompt.map_or(0, |p| g.shape(p)[0]);
    let v = ck.config.vocab_size;
    let mark = g.len();
    let mut outs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut seq = input.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new {
            if l + seq.len() > ck.config.max_seq_len && !out.is_empty() {
                break;
            }
            let (logits, _) = ck.forward(&mut g, &b.backbone, b.prompt, &seq, b.lora.as_ref())?;
            let vals = g.value(logits);
            let next = kernels::argmax(&vals[vals.len() - v..]);
            g.truncate(mark);
            out.push(next);
            if next == crate::backbone::EOS {
                break;
            }
            seq.push(next);
        }
        outs.push(out);
    }
    Ok(outs)
}

/// Generates on the test split and scores with the task's metric.
pub fn evaluate<T: Tunable>(
    t: &T,
    shared: &BackboneCheckpoint,
    data: &TaskData,
    max_new: usize,
) -> Result<EvalOutcome> {
    let inputs: Vec<&[usize]> = data.test.iter().map(|e| e.input_ids.as_slice()).collect();
    let gen = generate_all(t, shared, &inputs, max_new)?;
    let tok = &shared.tokenizer;
    let preds = gen
        .iter()
        .map(|ids| tok.decode_generated(ids))
        .collect::<Result<Vec<_>>>()?;
    score_outputs(&data.dataset_id, data.task_type, &preds, &data.test_targets)
}

#[derive(Clone, Debug)]
pub struct FitReport<T> {
    pub best: T,
    /// Validation loss at initialization followed by one entry per epoch run.
    pub val_losses: Vec<f64>,
    /// 0 means the initialization was never improved on.
    pub best_epoch: usize,
    pub steps: usize,
    pub trainable_scalars: usize,
}

/// Full-data training with per-epoch validation and patience-based early
/// stopping; returns the best-validation state.
pub fn fit_full<T: Tunable>(
    init: T,
    shared: &BackboneCheckpoint,
    data: &TaskData,
    cfg: &AdaptConfig,
) -> Result<FitReport<T>> {
    cfg.validate()?;
    if data.validation.is_empty() {
        return Err(Error::contract(format!(
            "{} has an empty validation split",
            data.dataset_id
        )));
    }
    if data.train.is_empty() {
        return Err(Error::contract(format!(
            "{} has an empty training split",
            data.dataset_id
        )));
    }
    let mut cur = init;
    let mut opt = new_optimizer(&cur, cfg);
    let trainable_scalars = opt.registered_scalars();
    let mut best = cur.clone();
    let mut best_loss = eval_loss(&cur, shared, &data.validation)?;
    let mut val_losses = vec![best_loss];
    let (mut best_epoch, mut bad, mut steps) = (0, 0, 0);
    let tag = format!("fit-{}-{}", cur.method(), data.dataset_id);
    let mut rng = seeds::rng(seeds::mix_str(cfg.seed, &tag));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            train_step(&mut cur, shared, &mut opt, &batch)?;
            steps += 1;
        }
        let v = eval_loss(&cur, shared, &data.validation)?;
        val_losses.push(v);
        if v < best_loss {
            best_loss = v;
            best = cur.clone();
            best_epoch = epoch;
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    Ok(FitReport {
        best,
        val_losses,
        best_epoch,
        steps,
        trainable_scalars,
    })
}

#[derive(Clone, Debug)]
pub struct FewShotFit<T> {
    pub adapted: T,
    pub steps: usize,
    pub step_losses: Vec<f64>,
    pub trainable_scalars: usize,
}

/// The `k` training indices used by a draw; identical for every method.
pub fn draw_indices(n_train: usize, k: usize, task: &str, draw_seed: u64) -> Result<Vec<usize>> {
    if k > n_train {
        return Err(Error::contract(format!(
            "k={k} exceeds the {n_train} training records of {task}"
        )));
    }
    let mut rng = seeds::rng(seeds::mix_str(draw_seed, &format!("fewshot-draw-{task}")));
    Ok(rand::seq::index::sample(&mut rng, n_train, k).into_vec())
}

/// Fixed-step adaptation on `k` drawn examples. `k = 0` performs no step.
pub fn fit_fewshot<T: Tunable>(
    init: T,
    shared: &BackboneCheckpoint,
    data: &TaskData,
    k: usize,
    draw_seed: u64,
    cfg: &AdaptConfig,
) -> Result<FewShotFit<T>> {
    let mut idx = draw_indices(data.train.len(), k, &data.dataset_id, draw_seed)?;
    let mut cur = init;
    let mut opt = new_optimizer(&cur, cfg);
    let trainable_scalars = opt.registered_scalars();
    if k == 0 {
        return Ok(FewShotFit {
            adapted: cur,
            steps: 0,
            step_losses: Vec::new(),
            trainable_scalars,
        });
    }
    let mut rng = seeds::rng(seeds::mix_str(
        draw_seed,
        &format!("fewshot-order-{}", data.dataset_id),
    ));
    idx.shuffle(&mut rng);
    let b = k.min(cfg.fewshot_batch_cap);
    let mut step_losses = Vec::with_capacity(cfg.fewshot_steps);
    for s in 0..cfg.fewshot_steps {
        let batch: Vec<&Example> = (0..b).map(|i| &data.train[idx[(s * b + i) % k]]).collect();
        step_losses.push(train_step(&mut cur, shared, &mut opt, &batch)?);
    }
    debug_assert_eq!(opt.steps() as usize, cfg.fewshot_steps);
    Ok(FewShotFit {
        adapted: cur,
        steps: opt.steps() as usize,
        step_losses,
        trainable_scalars,
    })
}

/// MPT Stage 3 on the full target corpus.
pub fn adapt_full(
    shared: &BackboneCheckpoint,
    distilled: &Distilled,
    data: &TaskData,
    cfg: &AdaptConfig,
) -> Result<FitReport<MptTunable>> {
    fit_full(
        MptTunable::init(distilled, data, cfg.seed)?,
        shared,
        data,
        cfg,
    )
}

/// MPT few-shot adaptation for one draw.
pub fn adapt_fewshot(
    shared: &BackboneCheckpoint,
    distilled: &Distilled,
    data: &TaskData,
    k: usize,
    draw_seed: u64,
    cfg: &AdaptConfig,
) -> Result<FewShotFit<MptTunable>> {
    fit_fewshot(
        MptTunable::init(distilled, data, cfg.seed)?,
        shared,
        data,
        k,
        draw_seed,
        cfg,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrawResult {
    pub method: Method,
    pub task: String,
    pub task_type: TaskType,
    pub k: usize,
    pub draw_seed: u64,
    pub metric: MetricName,
    pub value: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotResult {
    pub method: Method,
    pub task: String,
    pub task_type: TaskType,
    pub k: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Read-only inputs shared by every sweep cell.
pub struct SweepInputs<'a> {
    pub shared: &'a BackboneCheckpoint,
    pub distilled: &'a Distilled,
    pub tasks: &'a [TaskData],
    pub baselines: &'a crate::baselines::BaselineConfig,
}

/// Adapts and evaluates every `(method, task, k, draw)` cell. Cells are
/// independent, so `jobs > 1` runs them on a thread pool without changing
/// any result.
pub fn run_fewshot_sweep(
    inputs: &SweepInputs<'_>,
    methods: &[Method],
    cfg: &AdaptConfig,
    jobs: usize,
) -> Result<(Vec<DrawResult>, Vec<FewShotResult>)> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &m in methods {
        for (ti, _) in inputs.tasks.iter().enumerate() {
            for &k in &cfg.k_set {
                for d in 0..cfg.n_draws {
                    cells.push((m, ti, k, cfg.seed + d as u64));
                }
            }
        }
    }
    let run = |&(m, ti, k, draw_seed): &(Method, usize, usize, u64)| -> Result<DrawResult> {
        let data = &inputs.tasks[ti];
        let init = AnyTunable::initial(
            m,
            inputs.shared,
            inputs.distilled,
            data,
            inputs.baselines,
            cfg,
        )?;
        let fit = fit_fewshot(init, inputs.shared, data, k, draw_seed, cfg)?;
        let outcome = evaluate(&fit.adapted, inputs.shared, data, cfg.max_new)?;
        Ok(DrawResult {
            method: m,
            task: data.dataset_id.clone(),
            task_type: data.task_type,
            k,
            draw_seed,
            metric: outcome.metric,
            value: outcome.value,
            steps: fit.steps,
        })
    };
    let draws: Vec<DrawResult> = if jobs <= 1 {
        cells.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect::<Result<_>>())?
    };
    Ok((
        draws.clone(),
        summarize(&draws, methods, inputs.tasks, &cfg.k_set),
    ))
}

pub fn summarize(
    draws: &[DrawResult],
    methods: &[Method],
    tasks: &[TaskData],
    k_set: &[usize],
) -> Vec<FewShotResult> {
    let mut out = Vec::new();
    for &m in methods {
        for t in tasks {
            for &k in k_set {
                let values: Vec<f64> = draws
                    .iter()
                    .filter(|d| d.method == m && d.task == t.dataset_id && d.k == k)
                    .map(|d| d.value)
                    .collect();
                let (mean, std) = mean_std(&values);
                out.push(FewShotResult {
                    method: m,
                    task: t.dataset_id.clone(),
                    task_type: t.task_type,
                    k,
                    values,
                    mean,
                    std,
                });
            }
        }
    }
    out
}

pub const DRAWS_CSV_HEADER: &str = "method,task,task_type,k,draw_seed,metric_name,value";
pub const AGGREGATE_CSV_HEADER: &str = "method,task_type,k,mean,std";

pub fn write_draws_csv<W: Write>(w: &mut W, draws: &[DrawResult]) -> Result<()> {
    writeln!(w, "{DRAWS_CSV_HEADER}")?;
    for d in draws {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6}",
            d.method, d.task, d.task_type, d.k, d.draw_seed, d.metric, d.value
        )?;
    }
    Ok(())
}

/// Per `(method, task_type, k)`: each draw's score is averaged over the
/// type's tasks, then mean and population std are taken across draws.
pub fn aggregate_by_type(
    results: &[FewShotResult],
    methods: &[Method],
    k_set: &[usize],
) -> Vec<(Method, TaskType, usize, f64, f64)> {
    let mut out = Vec::new();
    for &m in methods {
        for t in TaskType::ALL {
            for &k in k_set {
                let group: Vec<&FewShotResult> = results
                    .iter()
                    .filter(|r| r.method == m && r.task_type == t && r.k == k)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let n = group[0].values.len();
                let per_draw: Vec<f64> = (0..n)
                    .map(|i| group.iter().map(|r| r.values[i]).sum::<f64>() / group.len() as f64)
                    .collect();
                let (mean, std) = mean_std(&per_draw);
                out.push((m, t, k, mean, std));
            }
        }
    }
    out
}

pub fn write_aggregate_csv<W: Write>(
    w: &mut W,
    rows: &[(Method, TaskType, usize, f64, f64)],
) -> Result<()> {
    writeln!(w, "{AGGREGATE_CSV_HEADER}")?;
    for (m, t, k, mean, std) in rows {
        writeln!(w, "{m},{t},{k},{mean:.6},{std:.6}")?;
    }
    Ok(())
}
