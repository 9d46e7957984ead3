//! File-level pipeline stages. Each stage reads its inputs, never writes
//! them, and leaves a manifest (canonical config, seeds, input hashes) next
//! to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    aggregate_by_type, evaluate, fit_full, run_fewshot_sweep, summarize, write_aggregate_csv,
    write_draws_csv, DrawResult, FewShotResult, FitReport, SweepInputs, Tunable,
};
use crate::backbone::{encode_stream, pretrain_backbone, BackboneCheckpoint, Tokenizer};
use crate::baselines::{load_artifact, params_pct, AnyTunable, Method};
use crate::config::RunConfig;
use crate::container::write_atomic;
use crate::corpus::TaskData;
use crate::distillery::{train_shared_prompt, train_teacher, write_loss_csv, Distilled};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, Cell, EvalOutcome, RunReport};
use crate::promptkit::{
    compress_adapter, CompressedPrompt, PromptArtifact, SharedMetaPrompt, TaskFactors,
    TeacherPrompt,
};
use crate::seeds;
use crate::taskforge::{
    describe_world, generate_task_corpus, generate_world, read_dataset, write_dataset, Role,
    TaskRecord, TaskType,
};

pub const MANIFEST: &str = "manifest.txt";

/// FNV-1a over a file, or over the sorted relative paths and contents of a
/// directory tree.
pub fn hash_path(path: &Path) -> Result<u64> {
    fn walk(root: &Path, dir: &Path, h: u64) -> Result<u64> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        let mut h = h;
        for p in entries {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .into_owned();
            h = seeds::fnv1a64_update(h, rel.as_bytes());
            if p.is_dir() {
                h = walk(root, &p, h)?;
            } else {
                h = seeds::fnv1a64_update(h, &fs::read(&p)?);
            }
        }
        Ok(h)
    }
    if path.is_dir() {
        walk(path, path, seeds::fnv1a64(b""))
    } else {
        Ok(seeds::fnv1a64(&read(path)?))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::contract(format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::contract(format!("cannot read {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::contract(format!("cannot create {}: {e}", dir.display())))
}

/// Writes the provenance record of one command.
pub fn write_manifest(
    path: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let mut s = format!("command={command}\n[config]\n{}[seeds]\n", cfg.canonical());
    for (k, v) in cfg.to_map() {
        if k.ends_with(".seed") {
            s.push_str(&format!("{k}={v}\n"));
        }
    }
    s.push_str("[inputs]\n");
    for (name, p) in inputs {
        s.push_str(&format!("{name}={}:{:016x}\n", p.display(), hash_path(p)?));
    }
    write_atomic(path, s.as_bytes())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn dataset_id(t: TaskType, role: Role, i: usize) -> String {
    let tag = match role {
        Role::Source => "src",
        Role::Target => "tgt",
    };
    format!("{}-{tag}{i}", t.as_str().to_lowercase())
}

/// World description, vocabulary, pretraining stream and every task corpus.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    ensure_dir(&out.join("source"))?;
    ensure_dir(&out.join("target"))?;
    write_atomic(&out.join("world.txt"), describe_world(&world).as_bytes())?;
    write_atomic(
        &out.join("vocab.txt"),
        (world.vocabulary().join("\n") + "\n").as_bytes(),
    )?;
    write_atomic(
        &out.join("pretrain.txt"),
        (world.pretrain_corpus.join("\n") + "\n").as_bytes(),
    )?;
    for (role, per_type, n, sub) in [
        (
            Role::Source,
            cfg.source_datasets_per_type,
            cfg.source_records,
            "source",
        ),
        (
            Role::Target,
            cfg.target_datasets_per_type,
            cfg.target_records,
            "target",
        ),
    ] {
        for t in TaskType::ALL {
            for i in 0..per_type {
                let id = dataset_id(t, role, i);
                let records = generate_task_corpus(&world, t, n, role, &id, cfg.data_seed)?;
                let mut buf = Vec::new();
                write_dataset(&mut buf, &records)?;
                write_atomic(&out.join(sub).join(format!("{id}.tsv")), &buf)?;
            }
        }
    }
    info!("wrote world and corpora to {}", out.display());
    write_manifest(&out.join(MANIFEST), "gen-data", cfg, &[])
}

/// Everything `gen-data` produced, with datasets in canonical task order.
pub struct Dataset {
    pub vocab: Vec<String>,
    pub pretrain: Vec<String>,
    pub sources: Vec<Vec<TaskRecord>>,
    pub targets: Vec<Vec<TaskRecord>>,
}

fn read_corpora(dir: &Path) -> Result<Vec<Vec<TaskRecord>>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::contract(format!("cannot list {}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "tsv"));
    let mut out = Vec::new();
    for f in files {
        let records = read_dataset(read(&f)?.as_slice())?;
        if records.is_empty() {
            return Err(Error::contract(format!("{} holds no records", f.display())));
        }
        out.push(records);
    }
    out.sort_by(|a, b| (a[0].task_type, &a[0].dataset_id).cmp(&(b[0].task_type, &b[0].dataset_id)));
    Ok(out)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let lines = |name: &str| -> Result<Vec<String>> {
            Ok(read_text(&dir.join(name))?
                .lines()
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect())
        };
        Ok(Dataset {
            vocab: lines("vocab.txt")?,
            pretrain: lines("pretrain.txt")?,
            sources: read_corpora(&dir.join("source"))?,
            targets: read_corpora(&dir.join("target"))?,
        })
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::new(&self.vocab)
    }

    /// Source corpora with the training split capped per dataset.
    pub fn source_data(&self, tok: &Tokenizer, cap: usize) -> Result<Vec<TaskData>> {
        self.sources
            .iter()
            .map(|r| TaskData::from_records(tok, r, Some(cap)))
            .collect()
    }

    pub fn target_data(&self, tok: &Tokenizer) -> Result<Vec<TaskData>> {
        self.targets
            .iter()
            .map(|r| TaskData::from_records(tok, r, None))
            .collect()
    }

    pub fn target(&self, tok: &Tokenizer, task: &str) -> Result<TaskData> {
        let records = self
            .targets
            .iter()
            .find(|r| r[0].dataset_id == task)
            .ok_or_else(|| Error::contract(format!("unknown target task {task:?}")))?;
        TaskData::from_records(tok, records, None)
    }
}

fn check_tokenizer(ck: &BackboneCheckpoint, tok: &Tokenizer) -> Result<()> {
    if ck.tokenizer != *tok {
        return Err(Error::contract(
            "checkpoint vocabulary differs from the dataset vocabulary",
        ));
    }
    Ok(())
}

/// Pretrains and freezes the backbone; also writes `<out>.loss.csv`.
pub fn pretrain(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Vec<f64>> {
    let data = Dataset::load(data_dir)?;
    let tok = data.tokenizer()?;
    let streams = encode_stream(&tok, &data.pretrain)?;
    let bcfg = cfg.backbone_config(tok.vocab_size());
    let (ck, losses) = pretrain_backbone(&streams, bcfg, tok, &cfg.pretrain)?;
    info!("pretrained backbone: epoch losses {losses:?}");
    ck.save(out)?;
    let csv: String = std::iter::once("epoch,loss\n".to_string())
        .chain(
            losses
                .iter()
                .enumerate()
                .map(|(e, l)| format!("{},{l:.6}\n", e + 1)),
        )
        .collect();
    write_atomic(&sibling(out, ".loss.csv"), csv.as_bytes())?;
    write_manifest(
        &sibling(out, ".manifest.txt"),
        "pretrain",
        cfg,
        &[("data", data_dir)],
    )?;
    Ok(losses)
}

fn teacher_path(dir: &Path, t: TaskType) -> PathBuf {
    dir.join(format!("{}.prompt", t.as_str()))
}

fn save_csv(path: &Path, rows: &[crate::distillery::LossRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, rows)?;
    write_atomic(path, &buf)
}

/// Stage 1: one teacher per task type on the union of its source corpora.
pub fn train_teachers(
    cfg: &RunConfig,
    ck_path: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<Vec<(TeacherPrompt, Vec<f64>)>> {
    let ck = BackboneCheckpoint::load(ck_path)?;
    let data = Dataset::load(data_dir)?;
    let tok = data.tokenizer()?;
    check_tokenizer(&ck, &tok)?;
    let sources = data.source_data(&tok, cfg.distill.subsample_cap)?;
    ensure_dir(out)?;
    let mut result = Vec::new();
    for t in TaskType::ALL {
        let parts: Vec<TaskData> = sources
            .iter()
            .filter(|s| s.task_type == t)
            .cloned()
            .collect();
        let merged = TaskData::merge(&parts, &format!("{}-src", t.as_str().to_lowercase()))?;
        let run = train_teacher(&ck, &merged, &cfg.distill)?;
        info!("teacher {t}: epoch losses {:?}", run.epoch_losses);
        run.result.save(&teacher_path(out, t))?;
        save_csv(&out.join(format!("{}.loss.csv", t.as_str())), &run.rows)?;
        result.push((run.result, run.epoch_losses));
    }
    write_manifest(
        &out.join(MANIFEST),
        "train-teachers",
        cfg,
        &[("ckpt", ck_path), ("data", data_dir)],
    )?;
    Ok(result)
}

/// Stage 2: shared meta-prompt and per-type factors.
pub fn distill(
    cfg: &RunConfig,
    ck_path: &Path,
    teachers_dir: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<(Distilled, Vec<f64>)> {
    let ck = BackboneCheckpoint::load(ck_path)?;
    let data = Dataset::load(data_dir)?;
    let tok = data.tokenizer()?;
    check_tokenizer(&ck, &tok)?;
    let teachers = TaskType::ALL
        .iter()
        .map(|&t| TeacherPrompt::load(&teacher_path(teachers_dir, t)))
        .collect::<Result<Vec<_>>>()?;
    let sources = data.source_data(&tok, cfg.distill.subsample_cap)?;
    let run = train_shared_prompt(&ck, &teachers, &sources, &cfg.distill)?;
    info!("distillation: epoch losses {:?}", run.epoch_losses);
    ensure_dir(out)?;
    run.result.meta.save(&out.join("meta.prompt"))?;
    for f in &run.result.factors {
        f.save(&out.join(format!("factors-{}.prompt", f.task_type.as_str())))?;
    }
    save_csv(&out.join("loss.csv"), &run.rows)?;
    write_manifest(
        &out.join(MANIFEST),
        "distill",
        cfg,
        &[
            ("ckpt", ck_path),
            ("teachers", teachers_dir),
            ("data", data_dir),
        ],
    )?;
    Ok((run.result, run.epoch_losses))
}

pub fn load_distilled(dir: &Path) -> Result<Distilled> {
    let meta = SharedMetaPrompt::load(&dir.join("meta.prompt"))?;
    let factors = TaskType::ALL
        .iter()
        .map(|t| TaskFactors::load(&dir.join(format!("factors-{}.prompt", t.as_str()))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Distilled { meta, factors })
}

/// Full-data adaptation of one method on one target task.
pub struct AdaptRun {
    pub fit: FitReport<AnyTunable>,
    pub params_pct: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn adapt(
    cfg: &RunConfig,
    ck_path: &Path,
    meta_dir: Option<&Path>,
    data_dir: &Path,
    task: &str,
    method: Method,
    out: &Path,
    compress: Option<&Path>,
) -> Result<AdaptRun> {
    let ck = BackboneCheckpoint::load(ck_path)?;
    let data = Dataset::load(data_dir)?;
    let tok = data.tokenizer()?;
    check_tokenizer(&ck, &tok)?;
    let target = data.target(&tok, task)?;
    let distilled = match (method, meta_dir) {
        (Method::Mpt, None) => {
            return Err(Error::contract(
                "MPT adaptation needs the distilled meta-prompt directory",
            ))
        }
        (_, Some(d)) => Some(load_distilled(d)?),
        (_, None) => None,
    };
    let empty;
    let dist = match &distilled {
        Some(d) => d,
        None => {
            empty = placeholder_distilled(&ck, cfg)?;
            &empty
        }
    };
    let init = AnyTunable::initial(method, &ck, dist, &target, &cfg.baselines, &cfg.adapt)?;
    let fit = fit_full(init, &ck, &target, &cfg.adapt)?;
    info!(
        "adapted {method} on {task}: best epoch {} of {:?}",
        fit.best_epoch, fit.val_losses
    );
    if let Some(p) = out.parent() {
        ensure_dir(p)?;
    }
    fit.best.save(out)?;
    let csv: String = std::iter::once("epoch,val_loss\n".to_string())
        .chain(
            fit.val_losses
                .iter()
                .enumerate()
                .map(|(e, l)| format!("{e},{l:.6}\n")),
        )
        .collect();
    write_atomic(&sibling(out, ".loss.csv"), csv.as_bytes())?;
    if let Some(cpath) = compress {
        let AnyTunable::Mpt(m) = &fit.best else {
            return Err(Error::contract("--compress applies to MPT adapters only"));
        };
        let prompt = compress_adapter(&dist.meta, &m.adapter)?;
        CompressedPrompt {
            source_type: m.adapter.source_type,
            prompt,
        }
        .save(cpath)?;
    }
    let mut inputs: Vec<(&str, &Path)> = vec![("ckpt", ck_path), ("data", data_dir)];
    if let Some(d) = meta_dir {
        inputs.push(("meta", d));
    }
    write_manifest(&sibling(out, ".manifest.txt"), "adapt", cfg, &inputs)?;
    let params_pct = params_pct(fit.trainable_scalars, ck.weights.param_count());
    Ok(AdaptRun { fit, params_pct })
}

/// Baselines do not read the distilled prompt; this stands in for it.
fn placeholder_distilled(ck: &BackboneCheckpoint, cfg: &RunConfig) -> Result<Distilled> {
    let (l, d) = (cfg.distill.prompt_len, ck.d_model());
    Ok(Distilled {
        meta: SharedMetaPrompt {
            p_star: crate::ndtensor::Tensor::zeros(&[l, d])?,
        },
        factors: Vec::new(),
    })
}

/// One line of the evaluation JSON-lines output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: Method,
    pub trainable_scalars: usize,
    pub params_pct: f64,
    #[serde(flatten)]
    pub outcome: EvalOutcome,
}

pub fn eval(
    cfg: &RunConfig,
    ck_path: &Path,
    artifact: &Path,
    meta_dir: Option<&Path>,
    data_dir: &Path,
    task: &str,
    out: &Path,
) -> Result<EvalRecord> {
    let ck = BackboneCheckpoint::load(ck_path)?;
    let data = Dataset::load(data_dir)?;
    let tok = data.tokenizer()?;
    check_tokenizer(&ck, &tok)?;
    let target = data.target(&tok, task)?;
    let meta = meta_dir
        .map(|d| SharedMetaPrompt::load(&d.join("meta.prompt")))
        .transpose()?;
    let loaded = load_artifact(artifact, meta.as_ref())?;
    let outcome = evaluate(&loaded.tunable, &ck, &target, cfg.adapt.max_new)?;
    let trainable_scalars = match (&loaded.tunable, loaded.method) {
        (AnyTunable::Pt(_), Method::Mpt) => cfg.distill.prompt_len + ck.d_model(),
        (t, _) => t.trainable_scalars(),
    };
    let rec = EvalRecord {
        method: loaded.method,
        trainable_scalars,
        params_pct: params_pct(trainable_scalars, ck.weights.param_count()),
        outcome,
    };
    info!(
        "{} on {task}: {} = {:.4}",
        rec.method, rec.outcome.metric, rec.outcome.value
    );
    let mut line = serde_json::to_string(&rec).map_err(|e| Error::format(e.to_string()))?;
    line.push('\n');
    if let Some(p) = out.parent() {
        ensure_dir(p)?;
    }
    write_atomic(out, line.as_bytes())?;
    Ok(rec)
}

fn collect_jsonl(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::contract(format!("cannot list {}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_jsonl(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "jsonl") {
            out.push(p);
        }
    }
    Ok(())
}

/// Builds the method-by-task table from every `*.jsonl` under `runs`.
pub fn build_report(runs: &Path) -> Result<RunReport> {
    let mut files = Vec::new();
    collect_jsonl(runs, &mut files)?;
    let mut records = Vec::new();
    for f in files {
        for (i, line) in read_text(&f)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: EvalRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("{}: {e}", f.display()),
            })?;
            records.push(r);
        }
    }
    if records.is_empty() {
        return Err(Error::contract(format!(
            "no evaluation records under {}",
            runs.display()
        )));
    }
    let mut tasks: Vec<(TaskType, String)> = records
        .iter()
        .map(|r| (r.outcome.task_type, r.outcome.task.clone()))
        .collect();
    tasks.sort();
    tasks.dedup();
    let task_ids: Vec<String> = tasks.into_iter().map(|(_, t)| t).collect();
    let mut methods = Vec::new();
    for m in Method::ALL {
        if let Some(r) = records.iter().find(|r| r.method == m) {
            methods.push((m.display_name().to_string(), Some(r.params_pct)));
        }
    }
    let cells: Vec<Cell> = records
        .iter()
        .map(|r| Cell {
            method: r.method.display_name().to_string(),
            task: r.outcome.task.clone(),
            value: r.outcome.value,
        })
        .collect();
    aggregate_report(&cells, &methods, &task_ids)
}

pub fn report(runs: &Path, out: &Path) -> Result<RunReport> {
    let r = build_report(runs)?;
    write_atomic(out, r.to_tsv().as_bytes())?;
    Ok(r)
}

/// Result of the few-shot sweep command.
pub struct FewShotRun {
    pub draws: Vec<DrawResult>,
    pub results: Vec<FewShotResult>,
}

pub const SUMMARY_CSV_HEADER: &str = "method,task,task_type,k,mean,std";

pub fn fewshot(
    cfg: &RunConfig,
    ck_path: &Path,
    meta_dir: &Path,
    data_dir: &Path,
    methods: &[Method],
    out: &Path,
    jobs: usize,
) -> Result<FewShotRun> {
    let ck = BackboneCheckpoint::load(ck_path)?;
    let data = Dataset::load(data_dir)?;
    let tok = data.tokenizer()?;
    check_tokenizer(&ck, &tok)?;
    let tasks = data.target_data(&tok)?;
    let distilled = load_distilled(meta_dir)?;
    let inputs = SweepInputs {
        shared: &ck,
        distilled: &distilled,
        tasks: &tasks,
        baselines: &cfg.baselines,
    };
    let (draws, results) = run_fewshot_sweep(&inputs, methods, &cfg.adapt, jobs)?;
    debug_assert_eq!(
        results,
        summarize(&draws, methods, &tasks, &cfg.adapt.k_set)
    );
    ensure_dir(out)?;
    let mut buf = Vec::new();
    write_draws_csv(&mut buf, &draws)?;
    write_atomic(&out.join("draws.csv"), &buf)?;
    let mut buf = Vec::new();
    write_aggregate_csv(
        &mut buf,
        &aggregate_by_type(&results, methods, &cfg.adapt.k_set),
    )?;
    write_atomic(&out.join("fewshot.csv"), &buf)?;
    let mut s = format!("{SUMMARY_CSV_HEADER}\n");
    for r in &results {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.method, r.task, r.task_type, r.k, r.mean, r.std
        ));
    }
    write_atomic(&out.join("per_task.csv"), s.as_bytes())?;
    write_manifest(
        &out.join(MANIFEST),
        "fewshot",
        cfg,
        &[("ckpt", ck_path), ("meta", meta_dir), ("data", data_dir)],
    )?;
    Ok(FewShotRun { draws, results })
}

/// Paths of a complete run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout {
            root: root.to_path_buf(),
        }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.cfg")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn ckpt(&self) -> PathBuf {
        self.root.join("backbone.mptc")
    }
    pub fn teachers(&self) -> PathBuf {
        self.root.join("teachers")
    }
    pub fn distill(&self) -> PathBuf {
        self.root.join("distill")
    }
    pub fn adapter(&self, m: Method, task: &str) -> PathBuf {
        self.root
            .join("adapt")
            .join(m.as_str())
            .join(format!("{task}.bin"))
    }
    pub fn eval(&self, m: Method, task: &str) -> PathBuf {
        self.root
            .join("eval")
            .join(format!("{}-{task}.jsonl", m.as_str()))
    }
    pub fn fewshot(&self) -> PathBuf {
        self.root.join("fewshot")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.tsv")
    }
}

/// What a full run produced, for inspection by callers and tests.
pub struct RunSummary {
    pub pretrain_losses: Vec<f64>,
    pub teacher_losses: Vec<(TaskType, Vec<f64>)>,
    pub distill_losses: Vec<f64>,
    pub ckpt_hash_before: u64,
    pub ckpt_hash_after: u64,
    pub report: RunReport,
    pub fewshot: FewShotRun,
    /// Wall time of the few-shot sweep alone.
    pub fewshot_seconds: f64,
}

/// Every stage in order into `root`.
pub fn run_all(cfg: &RunConfig, root: &Path, jobs: usize) -> Result<RunSummary> {
    let lay = RunLayout::new(root);
    ensure_dir(root)?;
    write_atomic(&lay.config(), cfg.canonical().as_bytes())?;
    gen_data(cfg, &lay.data())?;
    let pretrain_losses = pretrain(cfg, &lay.data(), &lay.ckpt())?;
    let ckpt_hash_before = hash_path(&lay.ckpt())?;
    let teachers = train_teachers(cfg, &lay.ckpt(), &lay.data(), &lay.teachers())?;
    let teacher_losses = teachers
        .into_iter()
        .map(|(t, l)| (t.task_type, l))
        .collect();
    let (_, distill_losses) = distill(
        cfg,
        &lay.ckpt(),
        &lay.teachers(),
        &lay.data(),
        &lay.distill(),
    )?;
    let data = Dataset::load(&lay.data())?;
    let task_ids: Vec<String> = data
        .targets
        .iter()
        .map(|r| r[0].dataset_id.clone())
        .collect();
    for &m in &cfg.report_methods {
        for task in &task_ids {
            let art = lay.adapter(m, task);
            let meta = (m == Method::Mpt).then(|| lay.distill());
            adapt(
                cfg,
                &lay.ckpt(),
                meta.as_deref(),
                &lay.data(),
                task,
                m,
                &art,
                None,
            )?;
            eval(
                cfg,
                &lay.ckpt(),
                &art,
                meta.as_deref(),
                &lay.data(),
                task,
                &lay.eval(m, task),
            )?;
        }
    }
    let report = report(&lay.root.join("eval"), &lay.report())?;
    let start = std::time::Instant::now();
    let fewshot = fewshot(
        cfg,
        &lay.ckpt(),
        &lay.distill(),
        &lay.data(),
        &cfg.fewshot_methods,
        &lay.fewshot(),
        jobs,
    )?;
    let fewshot_seconds = start.elapsed().as_secs_f64();
    let ckpt_hash_after = hash_path(&lay.ckpt())?;
    Ok(RunSummary {
        pretrain_losses,
        teacher_losses,
        distill_losses,
        ckpt_hash_before,
        ckpt_hash_after,
        report,
        fewshot,
        fewshot_seconds,
    })
}
