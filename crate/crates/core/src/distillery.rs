//! Teacher prompt training and joint distillation into a shared meta-prompt.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneCheckpoint, Example, Scored};
use crate::corpus::TaskData;
use crate::error::{Error, Result};
use crate::ndtensor::{Float, Graph, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::promptkit::{
    compose_prompt_var, init_prompt_from_vocab, SharedMetaPrompt, TaskFactors, TeacherPrompt,
};
use crate::seeds;
use crate::taskforge::TaskType;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub prompt_len: usize,
    pub rank: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub k_choices: Vec<usize>,
    pub epochs_stage1: usize,
    pub lr_stage1: f64,
    pub batch_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_stage2: f64,
    pub batch_stage2: usize,
    pub subsample_cap: usize,
    pub init_noise: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            prompt_len: 8,
            rank: 1,
            lambda1: 0.5,
            lambda2: 0.5,
            k_choices: vec![2, 3, 4, 5],
            epochs_stage1: 5,
            lr_stage1: 0.05,
            batch_stage1: 32,
            epochs_stage2: 10,
            lr_stage2: 0.01,
            batch_stage2: 16,
            subsample_cap: 512,
            init_noise: 0.01,
            seed: 7,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::contract("loss weights must be nonnegative"));
        }
        if self.k_choices.is_empty()
            || self
                .k_choices
                .iter()
                .any(|&k| k == 0 || k > TaskType::ALL.len())
        {
            return Err(Error::contract(format!(
                "K choices {:?} must lie in 1..=5",
                self.k_choices
            )));
        }
        if self.prompt_len == 0 || self.batch_stage1 == 0 || self.batch_stage2 == 0 {
            return Err(Error::contract(
                "prompt length and batch sizes must be positive",
            ));
        }
        Ok(())
    }
}

/// One row of the loss CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub task_type: TaskType,
    pub task_loss: f64,
    pub logit_loss: f64,
    pub hidden_loss: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "stage,epoch,step,task_type,task_loss,logit_loss,hidden_loss,total";

pub fn write_loss_csv<W: Write>(w: &mut W, rows: &[LossRow]) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.stage,
            r.epoch,
            r.step,
            r.task_type,
            r.task_loss,
            r.logit_loss,
            r.hidden_loss,
            r.total
        )?;
    }
    Ok(())
}

/// Output of a training stage.
#[derive(Clone, Debug)]
pub struct StageRun<T> {
    pub result: T,
    pub rows: Vec<LossRow>,
    /// Mean step loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Scalars registered with the optimizer.
    pub trainable_scalars: usize,
}

/// Mean cross-entropy over `examples` with `prompt` prepended.
pub fn prompt_ce<E: Float>(
    g: &mut Graph<E>,
    ck: &BackboneCheckpoint<E>,
    b: &crate::backbone::BoundBackbone,
    prompt: Option<Var>,
    examples: &[&Example],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(examples.len());
    for ex in examples {
        let s = ck.forward_with_prompt(g, b, prompt, &ex.input_ids, &ex.target_ids, None)?;
        terms.push(g.cross_entropy(s.logits, &s.next_ids, &s.loss_mask)?);
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, E::from_f64(1.0 / examples.len() as f64)))
}

/// Stage 1: trains one soft prompt on a single task type.
pub fn train_teacher(
    ck: &BackboneCheckpoint,
    data: &TaskData,
    cfg: &DistillConfig,
) -> Result<StageRun<TeacherPrompt>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::contract(format!(
            "no training records for {}",
            data.task_type
        )));
    }
    let tag = data.task_type.as_str();
    let mut prompt = init_prompt_from_vocab(
        ck,
        cfg.prompt_len,
        seeds::mix_str(cfg.seed, &format!("teacher-{tag}")),
    )?;
    prompt.set_requires_grad(true);
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr_stage1), &[&prompt]);
    let mut rng = seeds::rng(seeds::mix_str(cfg.seed, &format!("teacher-order-{tag}")));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let batch = cfg.batch_stage1.min(order.len());

    let mut g = Graph::new();
    let b = ck.bind(&mut g, false);
    let mark = g.len();
    let (mut rows, mut epoch_losses, mut step) = (Vec::new(), Vec::new(), 0);
    for epoch in 0..cfg.epochs_stage1 {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(batch).collect();
        for idx in &chunks {
            g.truncate(mark);
            let p = g.leaf(&prompt);
            let exs: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let loss = prompt_ce(&mut g, ck, &b, Some(p), &exs)?;
            let value = checked(g.scalar(loss) as f64)?;
            g.backward(loss)?.absorb_into(p, &mut prompt)?;
            opt.step(&mut [&mut prompt])?;
            rows.push(LossRow {
                stage: 1,
                epoch,
                step,
                task_type: data.task_type,
                task_loss: value,
                logit_loss: 0.0,
                hidden_loss: 0.0,
                total: value,
            });
            sum += value;
            step += 1;
        }
        epoch_losses.push(sum / chunks.len() as f64);
    }
    prompt.set_requires_grad(false);
    Ok(StageRun {
        result: TeacherPrompt {
            task_type: data.task_type,
            prompt,
        },
        rows,
        epoch_losses,
        trainable_scalars: opt.registered_scalars(),
    })
}

fn checked(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("training loss became {v}")))
    }
}

pub struct DistillTerms {
    pub total: Var,
    pub task: Var,
    pub logit: Var,
    pub hidden: Var,
}

/// `CE + λ₁·KL(teacher ‖ student) + λ₂·MSE(hidden)` for one aligned example.
/// The teacher side must not carry gradient.
pub fn distill_loss<E: Float>(
    g: &mut Graph<E>,
    teacher: &Scored,
    student: &Scored,
    lambda1: f64,
    lambda2: f64,
) -> Result<DistillTerms> {
    if teacher.prompt_len != student.prompt_len {
        return Err(Error::contract(format!(
            "teacher prompt length {} differs from student prompt length {}",
            teacher.prompt_len, student.prompt_len
        )));
    }
    if teacher.next_ids != student.next_ids || teacher.loss_mask != student.loss_mask {
        return Err(Error::contract(
            "teacher and student scored different sequences",
        ));
    }
    let task = g.cross_entropy(student.logits, &student.next_ids, &student.loss_mask)?;
    let p = g.softmax_rows(teacher.logits)?;
    let q = g.softmax_rows(student.logits)?;
    let logit = g.kl_divergence_rows(p, q, &student.loss_mask)?;
    let hidden = g.mse(teacher.hidden, student.hidden, &student.token_mask())?;
    let wl = g.scale(logit, E::from_f64(lambda1));
    let wh = g.scale(hidden, E::from_f64(lambda2));
    let total = g.add(task, wl)?;
    let total = g.add(total, wh)?;
    Ok(DistillTerms {
        total,
        task,
        logit,
        hidden,
    })
}

/// Draws `K` uniformly from `k_choices`, then `K` distinct task types.
/// The result is in canonical task order.
pub fn sample_tasks<R: Rng + ?Sized>(k_choices: &[usize], rng: &mut R) -> Vec<TaskType> {
    let k = k_choices[rng.random_range(0..k_choices.len())].min(TaskType::ALL.len());
    let mut picked = rand::seq::index::sample(rng, TaskType::ALL.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| TaskType::ALL[i]).collect()
}

/// Per-type cycling sampler over a reshuffled order.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Cursor { order, pos: 0, rng }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Shared meta-prompt plus one factor pair per source task type.
#[derive(Clone, Debug, PartialEq)]
pub struct Distilled {
    pub meta: SharedMetaPrompt,
    /// In canonical task order.
    pub factors: Vec<TaskFactors>,
}

impl Distilled {
    pub fn factors_for(&self, t: TaskType) -> Result<&TaskFactors> {
        self.factors
            .iter()
            .find(|f| f.task_type == t)
            .ok_or_else(|| Error::contract(format!("no source factors for {t}")))
    }
}

/// Element-wise mean of the teacher prompts, summed in canonical order.
pub fn mean_prompt(teachers: &[&TeacherPrompt]) -> Result<Tensor> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::contract("no teachers"))?;
    let mut acc = vec![0.0f32; first.prompt.numel()];
    for t in teachers {
        if t.prompt.shape() != first.prompt.shape() {
            return Err(Error::contract("teacher prompts differ in shape"));
        }
        for (a, x) in acc.iter_mut().zip(t.prompt.data()) {
            *a += x;
        }
    }
    let n = teachers.len() as f32;
    Tensor::new(
        first.prompt.shape(),
        acc.into_iter().map(|a| a / n).collect(),
    )
}

/// Stage 2: jointly learns `P*` and the per-type factors by distillation.
///
/// One epoch is `ceil(total_train / (batch · mean K))` steps, so each training
/// example is visited about once per epoch in expectation.
pub fn train_shared_prompt(
    ck: &BackboneCheckpoint,
    teachers: &[TeacherPrompt],
    corpora: &[TaskData],
    cfg: &DistillConfig,
) -> Result<StageRun<Distilled>> {
    cfg.validate()?;
    let mut by_type: Vec<(&TeacherPrompt, Vec<&Example>)> = Vec::with_capacity(TaskType::ALL.len());
    for t in TaskType::ALL {
        let teacher = teachers
            .iter()
            .find(|p| p.task_type == t)
            .ok_or_else(|| Error::contract(format!("missing teacher prompt for {t}")))?;
        let exs: Vec<&Example> = corpora
            .iter()
            .filter(|c| c.task_type == t)
            .flat_map(|c| &c.train)
            .collect();
        if exs.is_empty() {
            return Err(Error::contract(format!(
                "no source training records for {t}"
            )));
        }
        by_type.push((teacher, exs));
    }
    let (l, d) = (teachers[0].prompt.rows(), teachers[0].prompt.cols());
    let ts: Vec<&TeacherPrompt> = by_type.iter().map(|(t, _)| *t).collect();
    let mut p_star = mean_prompt(&ts)?.with_requires_grad(true);
    let mut factors: Vec<TaskFactors> = TaskType::ALL
        .iter()
        .map(|&t| TaskFactors::near_identity(t, l, d, cfg.rank, cfg.init_noise, cfg.seed))
        .collect::<Result<_>>()?;

    let mut opt = {
        let mut reg: Vec<&Tensor> = vec![&p_star];
        for f in &factors {
            reg.push(&f.u);
            reg.push(&f.v);
        }
        AdamW::new(AdamWConfig::with_lr(cfg.lr_stage2), &reg)
    };
    let mut cursors: Vec<Cursor> = by_type
        .iter()
        .enumerate()
        .map(|(i, (_, exs))| {
            Cursor::new(
                exs.len(),
                seeds::mix(seeds::mix_str(cfg.seed, "stage2-cursor"), i as u64),
            )
        })
        .collect();
    let mut rng = seeds::rng(seeds::mix_str(cfg.seed, "stage2-tasks"));
    let total_train: usize = by_type.iter().map(|(_, e)| e.len()).sum();
    let mean_k = cfg.k_choices.iter().sum::<usize>() as f64 / cfg.k_choices.len() as f64;
    let steps_per_epoch = ((total_train as f64) / (cfg.batch_stage2 as f64 * mean_k))
        .ceil()
        .max(1.0) as usize;

    let mut g = Graph::new();
    let b = ck.bind(&mut g, false);
    let mark = g.len();
    let (mut rows, mut epoch_losses, mut step) = (Vec::new(), Vec::new(), 0);
    for epoch in 0..cfg.epochs_stage2 {
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let tasks = sample_tasks(&cfg.k_choices, &mut rng);
            g.truncate(mark);
            let p = g.leaf(&p_star);
            let mut task_losses = Vec::with_capacity(tasks.len());
            let mut bound = Vec::with_capacity(tasks.len());
            for &t in &tasks {
                let ti = t.index();
                let (teacher, exs) = &by_type[ti];
                let (u, v) = (g.leaf(&factors[ti].u), g.leaf(&factors[ti].v));
                bound.push((ti, u, v));
                let student = compose_prompt_var(&mut g, p, u, v)?;
                let tp = g.constant(teacher.prompt.shape(), teacher.prompt.data().to_vec())?;
                let batch = cursors[ti].take(cfg.batch_stage2.min(exs.len()));
                let mut totals = Vec::with_capacity(batch.len());
                let (mut ct, mut cl, mut ch) = (0.0, 0.0, 0.0);
                for &i in &batch {
                    let ex = exs[i];
                    let ts = ck.forward_with_prompt(
                        &mut g,
                        &b,
                        Some(tp),
                        &ex.input_ids,
                        &ex.target_ids,
                        None,
                    )?;
                    let ss = ck.forward_with_prompt(
                        &mut g,
                        &b,
                        Some(student),
                        &ex.input_ids,
                        &ex.target_ids,
                        None,
                    )?;
                    let terms = distill_loss(&mut g, &ts, &ss, cfg.lambda1, cfg.lambda2)?;
                    ct += g.scalar(terms.task) as f64;
                    cl += g.scalar(terms.logit) as f64;
                    ch += g.scalar(terms.hidden) as f64;
                    totals.push(terms.total);
                }
                let sum_k = g.add_all(&totals)?;
                let lk = g.scale(sum_k, 1.0 / batch.len() as f32);
                let n = batch.len() as f64;
                rows.push(LossRow {
                    stage: 2,
                    epoch,
                    step,
                    task_type: t,
                    task_loss: ct / n,
                    logit_loss: cl / n,
                    hidden_loss: ch / n,
                    total: g.scalar(lk) as f64,
                });
                task_losses.push(lk);
            }
            let all = g.add_all(&task_losses)?;
            let loss = g.scale(all, 1.0 / tasks.len() as f32);
            let value = checked(g.scalar(loss) as f64)?;
            let grads = g.backward(loss)?;
            grads.absorb_into(p, &mut p_star)?;
            for (ti, u, v) in bound {
                grads.absorb_into(u, &mut factors[ti].u)?;
                grads.absorb_into(v, &mut factors[ti].v)?;
            }
            {
                let mut params: Vec<&mut Tensor> = vec![&mut p_star];
                for f in factors.iter_mut() {
                    params.push(&mut f.u);
                    params.push(&mut f.v);
                }
                opt.step(&mut params)?;
            }
            sum += value;
            step += 1;
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
    }
    p_star.set_requires_grad(false);
    for f in &mut factors {
        f.u.set_requires_grad(false);
        f.v.set_requires_grad(false);
    }
    Ok(StageRun {
        result: Distilled {
            meta: SharedMetaPrompt { p_star },
            factors,
        },
        rows,
        epoch_losses,
        trainable_scalars: opt.registered_scalars(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Tokenizer};

    fn tiny() -> BackboneCheckpoint<f32> {
        let words: Vec<String> = (0..9).map(|i| format!("w{i}")).collect();
        let tok = Tokenizer::new(&words).unwrap();
        let cfg = BackboneConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            tie_output: false,
        };
        let mut ck = BackboneCheckpoint::random(cfg, tok, 5).unwrap();
        ck.freeze();
        ck
    }

    fn scored_pair(
        g: &mut Graph<f32>,
        ck: &BackboneCheckpoint<f32>,
        tp: &Tensor,
        sp: Var,
    ) -> (Scored, Scored) {
        let b = ck.bind(g, false);
        let t = g.constant(tp.shape(), tp.data().to_vec()).unwrap();
        let ts = ck
            .forward_with_prompt(g, &b, Some(t), &[1, 7, 8, 6], &[9, 10, 2], None)
            .unwrap();
        let ss = ck
            .forward_with_prompt(g, &b, Some(sp), &[1, 7, 8, 6], &[9, 10, 2], None)
            .unwrap();
        (ts, ss)
    }

    #[test]
    fn identical_student_has_zero_distillation_terms() {
        let ck = tiny();
        let teacher = init_prompt_from_vocab(&ck, 3, 1).unwrap();
        let mut g = Graph::new();
        let p = g.leaf(&teacher.clone().with_requires_grad(true));
        let u = g.leaf(&Tensor::ones(&[3, 1]).unwrap());
        let v = g.leaf(&Tensor::ones(&[1, 8]).unwrap());
        let student = compose_prompt_var(&mut g, p, u, v).unwrap();
        let (ts, ss) = scored_pair(&mut g, &ck, &teacher, student);
        let terms = distill_loss(&mut g, &ts, &ss, 0.5, 0.5).unwrap();
        assert_eq!(g.scalar(terms.logit), 0.0);
        assert_eq!(g.scalar(terms.hidden), 0.0);
        assert!(g.scalar(terms.task) > 0.0);
    }

    #[test]
    fn zero_weights_and_linearity() {
        let ck = tiny();
        let teacher = init_prompt_from_vocab(&ck, 3, 1).unwrap();
        let student_t = init_prompt_from_vocab(&ck, 3, 2)
            .unwrap()
            .with_requires_grad(true);
        let mut g = Graph::new();
        let sp = g.leaf(&student_t);
        let (ts, ss) = scored_pair(&mut g, &ck, &teacher, sp);
        let zero = distill_loss(&mut g, &ts, &ss, 0.0, 0.0).unwrap();
        assert_eq!(
            g.scalar(zero.total).to_bits(),
            g.scalar(zero.task).to_bits()
        );
        let one = distill_loss(&mut g, &ts, &ss, 0.25, 0.0).unwrap();
        let two = distill_loss(&mut g, &ts, &ss, 0.5, 0.0).unwrap();
        let c1 = g.scalar(one.logit) * 0.25;
        let c2 = g.scalar(two.logit) * 0.5;
        assert_eq!(c2.to_bits(), (2.0 * c1).to_bits());
        for v in [one.task, one.logit, one.hidden] {
            assert!(g.scalar(v) >= 0.0);
        }
        let grads = g.backward(two.total).unwrap();
        assert!(grads.get(sp).is_some());
    }

    #[test]
    fn prompt_length_mismatch_is_contract_error() {
        let ck = tiny();
        let teacher = init_prompt_from_vocab(&ck, 3, 1).unwrap();
        let other = init_prompt_from_vocab(&ck, 4, 1).unwrap();
        let mut g = Graph::new();
        let sp = g.leaf(&other);
        let (ts, ss) = scored_pair(&mut g, &ck, &teacher, sp);
        assert!(matches!(
            distill_loss(&mut g, &ts, &ss, 0.5, 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sampler_frequencies() {
        let mut rng = seeds::rng(2024);
        let mut k_count = [0usize; 6];
        let mut inclusion = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            let s = sample_tasks(&[2, 3, 4, 5], &mut rng);
            k_count[s.len()] += 1;
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            for t in s {
                inclusion[t.index()] += 1;
            }
        }
        for k in 2..=5 {
            assert!((k_count[k] as f64 / n as f64 - 0.25).abs() < 0.02, "K={k}");
        }
        for c in inclusion {
            assert!((c as f64 / n as f64 - 0.7).abs() < 0.02);
        }
        assert_eq!(sample_tasks(&[5], &mut rng), TaskType::ALL.to_vec());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig {
            k_choices: vec![0, 2],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DistillConfig {
            k_choices: vec![6],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DistillConfig {
            lambda1: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DistillConfig::default().validate().is_ok());
    }

    #[test]
    fn loss_csv_layout() {
        let rows = vec![LossRow {
            stage: 1,
            epoch: 0,
            step: 3,
            task_type: TaskType::Qa,
            task_loss: 1.5,
            logit_loss: 0.0,
            hidden_loss: 0.0,
            total: 1.5,
        }];
        let mut out = Vec::new();
        write_loss_csv(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "stage,epoch,step,task_type,task_loss,logit_loss,hidden_loss,total\n1,0,3,QA,1.500000,0.000000,0.000000,1.500000\n"
        );
    }
}
