//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mpt_core::adapter::{aggregate_by_type, fit_fewshot, MptTunable, Tunable};
use mpt_core::backbone::BackboneCheckpoint;
use mpt_core::baselines::{load_artifact, AnyTunable, Method, PtTunable};
use mpt_core::config::RunConfig;
use mpt_core::corpus::TaskData;
use mpt_core::distillery::{
    distill_loss, prompt_ce, sample_tasks, train_shared_prompt, train_teacher, DistillConfig,
};
use mpt_core::metrics::{aggregate_report, macro_accuracy, mean_std, micro_f1, rouge_l, Cell};
use mpt_core::ndtensor::{Graph, Tensor, Var};
use mpt_core::pipeline::{load_distilled, run_all, Dataset, RunLayout, RunSummary};
use mpt_core::promptkit::{
    compose_prompt, compose_prompt_var, compose_target_prompt, compress_adapter, param_count,
    ParamMode, PromptArtifact, SharedMetaPrompt, TargetAdapter, TaskFactors, TeacherPrompt,
};
use mpt_core::seeds;
use mpt_core::taskforge::TaskType;
use mpt_core::verify::{run_gradcheck_suite, REL_TOL};

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

fn desk_config() -> RunConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    RunConfig::load(&p).expect("configs/desk.cfg parses")
}

struct Runs {
    cfg: RunConfig,
    a: PathBuf,
    b: PathBuf,
    summary_a: RunSummary,
    _tmp: tempfile::TempDir,
}

fn full_runs() -> std::result::Result<Runs, String> {
    let cfg = desk_config();
    let tmp = tempfile::tempdir().map_err(err)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    eprintln!("acceptance: full desk run A ({jobs} jobs)");
    let t = Instant::now();
    let summary_a = run_all(&cfg, &a, jobs).map_err(err)?;
    eprintln!(
        "acceptance: run A took {:.1}s; run B (1 job)",
        t.elapsed().as_secs_f64()
    );
    run_all(&cfg, &b, 1).map_err(err)?;
    Ok(Runs {
        cfg,
        a,
        b,
        summary_a,
        _tmp: tmp,
    })
}

fn c1_gradcheck() -> Outcome {
    let r = run_gradcheck_suite().map_err(err)?;
    ensure(
        r.max_rel_error < REL_TOL && r.seconds < 60.0,
        format!(
            "{} cases, max rel err {:.2e}, {:.2}s",
            r.cases.len(),
            r.max_rel_error,
            r.seconds
        ),
    )
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 0.0, 1.0, &mut seeds::rng(seed)).expect("shape")
}

fn c2_identities() -> Outcome {
    let mut rng = seeds::rng(2);
    for case in 0..100u64 {
        use rand::Rng;
        let (l, d) = (rng.random_range(1..12), rng.random_range(1..40));
        let r = rng.random_range(1..=l.min(d).min(4));
        let meta = SharedMetaPrompt {
            p_star: randn(&[l, d], 100 + case),
        };
        // Ones in the first column of U and first row of V give U·V = ones.
        let mut u = vec![0.0f32; l * r];
        let mut v = vec![0.0f32; r * d];
        for i in 0..l {
            u[i * r] = 1.0;
        }
        for j in 0..d {
            v[j] = 1.0;
        }
        let f = TaskFactors {
            task_type: TaskType::Ner,
            u: Tensor::new(&[l, r], u).unwrap(),
            v: Tensor::new(&[r, d], v).unwrap(),
        };
        let p = compose_prompt(&meta, &f).map_err(err)?;
        if !p.bits_eq(&meta.p_star) {
            return Err(format!("case {case}: ones factors changed P*"));
        }
        let a = TargetAdapter {
            target_task: "t".into(),
            source_type: TaskType::Re,
            u: randn(&[l], 200 + case),
            v: randn(&[d], 300 + case),
        };
        let target = compose_target_prompt(&meta, &a).map_err(err)?;
        let rank1 = TaskFactors {
            task_type: TaskType::Re,
            u: Tensor::new(&[l, 1], a.u.data().to_vec()).unwrap(),
            v: Tensor::new(&[1, d], a.v.data().to_vec()).unwrap(),
        };
        if !target.bits_eq(&compose_prompt(&meta, &rank1).map_err(err)?) {
            return Err(format!(
                "case {case}: target composition differs from rank-1 composition"
            ));
        }
    }
    Ok("100 seeded cases bit-exact".into())
}

/// Scalars of `vars` that received a gradient.
fn grad_scalars(g: &Graph, grads: &mpt_core::ndtensor::Gradients<f32>, vars: &[Var]) -> usize {
    vars.iter()
        .filter(|v| grads.get(**v).is_some())
        .map(|v| g.value(*v).len())
        .sum()
}

fn few(data: &TaskData, n: usize) -> TaskData {
    let mut d = data.clone();
    d.train.truncate(n);
    d
}

fn c3_params(runs: &Runs) -> Outcome {
    let cfg = &runs.cfg;
    let lay = RunLayout::new(&runs.a);
    let ck = BackboneCheckpoint::load(&lay.ckpt()).map_err(err)?;
    let data = Dataset::load(&lay.data()).map_err(err)?;
    let tok = data.tokenizer().map_err(err)?;
    let sources = data
        .source_data(&tok, cfg.distill.subsample_cap)
        .map_err(err)?;
    let targets = data.target_data(&tok).map_err(err)?;
    let (l, d, r) = (cfg.distill.prompt_len, ck.d_model(), cfg.distill.rank);
    let tau = TaskType::ALL.len();
    let want1 = l * d;
    let want2 = l * d + tau * (l * r + r * d);
    let want3 = l + d;
    let small = DistillConfig {
        epochs_stage1: 1,
        epochs_stage2: 1,
        ..cfg.distill.clone()
    };

    // Stage 1.
    let run1 = train_teacher(&ck, &few(&sources[0], 8), &small).map_err(err)?;
    let mut g = Graph::new();
    let b = ck.bind(&mut g, false);
    let p = g.leaf(&run1.result.prompt.clone().with_requires_grad(true));
    let exs: Vec<_> = sources[0].train.iter().take(4).collect();
    let loss = prompt_ce(&mut g, &ck, &b, Some(p), &exs).map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    let mut vars = b.vars();
    vars.push(p);
    let m1 = grad_scalars(&g, &grads, &vars);

    // Stage 2.
    let teachers: Vec<TeacherPrompt> = TaskType::ALL
        .iter()
        .map(|t| TeacherPrompt::load(&lay.teachers().join(format!("{t}.prompt"))))
        .collect::<mpt_core::Result<_>>()
        .map_err(err)?;
    let tiny: Vec<TaskData> = sources.iter().map(|s| few(s, 8)).collect();
    let run2 = train_shared_prompt(&ck, &teachers, &tiny, &small).map_err(err)?;
    let mut g = Graph::new();
    let b = ck.bind(&mut g, false);
    let ps = g.leaf(&run2.result.meta.p_star.clone().with_requires_grad(true));
    let mut vars = b.vars();
    vars.push(ps);
    let mut terms = Vec::new();
    for (f, t) in run2.result.factors.iter().zip(&teachers) {
        let u = g.leaf(&f.u.clone().with_requires_grad(true));
        let v = g.leaf(&f.v.clone().with_requires_grad(true));
        vars.extend([u, v]);
        let student = compose_prompt_var(&mut g, ps, u, v).map_err(err)?;
        let tp = g
            .constant(t.prompt.shape(), t.prompt.data().to_vec())
            .map_err(err)?;
        let ex = &sources
            .iter()
            .find(|s| s.task_type == f.task_type)
            .unwrap()
            .train[0];
        let ts = ck
            .forward_with_prompt(&mut g, &b, Some(tp), &ex.input_ids, &ex.target_ids, None)
            .map_err(err)?;
        let ss = ck
            .forward_with_prompt(
                &mut g,
                &b,
                Some(student),
                &ex.input_ids,
                &ex.target_ids,
                None,
            )
            .map_err(err)?;
        terms.push(
            distill_loss(&mut g, &ts, &ss, cfg.distill.lambda1, cfg.distill.lambda2)
                .map_err(err)?
                .total,
        );
    }
    let loss = g.add_all(&terms).map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    let m2 = grad_scalars(&g, &grads, &vars);

    // Stage 3.
    let distilled = load_distilled(&lay.distill()).map_err(err)?;
    let mpt = MptTunable::init(&distilled, &targets[0], cfg.adapt.seed).map_err(err)?;
    let fit = fit_fewshot(mpt.clone(), &ck, &targets[0], 1, 1, &cfg.adapt).map_err(err)?;
    let mut g = Graph::new();
    let bind = mpt.bind(&mut g, &ck).map_err(err)?;
    let exs: Vec<_> = targets[0].train.iter().take(4).collect();
    let loss = prompt_ce(&mut g, &ck, &bind.backbone, bind.prompt, &exs).map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    let mut vars = bind.backbone.vars();
    vars.extend(&bind.params);
    let m3 = grad_scalars(&g, &grads, &vars);

    let group = param_count(8, 32, 10, ParamMode::GroupTotal).map_err(err)?;
    let detail = format!(
        "stage1 {m1}/{} (want {want1}), stage2 {m2}/{} (want {want2}), stage3 {m3}/{} (want {want3}), group_total(8,32,10) = {group}",
        run1.trainable_scalars, run2.trainable_scalars, fit.trainable_scalars
    );
    ensure(
        m1 == want1
            && run1.trainable_scalars == want1
            && m2 == want2
            && run2.trainable_scalars == want2
            && m3 == want3
            && fit.trainable_scalars == want3
            && param_count(l as i64, d as i64, 1, ParamMode::Adaptation).map_err(err)?
                == want3 as u64
            && group == 656,
        detail,
    )
}

fn c4_compression(runs: &Runs) -> Outcome {
    let lay = RunLayout::new(&runs.a);
    let ck = BackboneCheckpoint::load(&lay.ckpt()).map_err(err)?;
    let distilled = load_distilled(&lay.distill()).map_err(err)?;
    let data = Dataset::load(&lay.data()).map_err(err)?;
    let tok = data.tokenizer().map_err(err)?;
    let targets = data.target_data(&tok).map_err(err)?;
    let mut rng = seeds::rng(4);
    let mut checked = 0;
    for i in 0..20 {
        use rand::Rng;
        let task = &targets[i % targets.len()];
        let art = load_artifact(
            &lay.adapter(Method::Mpt, &task.dataset_id),
            Some(&distilled.meta),
        )
        .map_err(err)?;
        let AnyTunable::Mpt(mpt) = art.tunable else {
            return Err(format!("{} adapter is not an MPT adapter", task.dataset_id));
        };
        let ex = &task.test[rng.random_range(0..task.test.len())];
        let mut g = Graph::new();
        let live = mpt.bind(&mut g, &ck).map_err(err)?;
        let s = ck
            .forward_with_prompt(
                &mut g,
                &live.backbone,
                live.prompt,
                &ex.input_ids,
                &ex.target_ids,
                None,
            )
            .map_err(err)?;
        let live_logits = g.value(s.logits).to_vec();
        let c = compress_adapter(&distilled.meta, &mpt.adapter).map_err(err)?;
        let mut g = Graph::new();
        let b = ck.bind(&mut g, false);
        let cp = g.constant(c.shape(), c.data().to_vec()).map_err(err)?;
        let s = ck
            .forward_with_prompt(&mut g, &b, Some(cp), &ex.input_ids, &ex.target_ids, None)
            .map_err(err)?;
        let same = live_logits.len() == g.value(s.logits).len()
            && live_logits
                .iter()
                .zip(g.value(s.logits))
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("input {i} on {}: logits differ", task.dataset_id));
        }
        checked += 1;
    }
    Ok(format!("{checked} inputs bit-identical"))
}

fn c5_frozen(runs: &Runs) -> Outcome {
    let s = &runs.summary_a;
    let ck = BackboneCheckpoint::load(&RunLayout::new(&runs.a).ckpt()).map_err(err)?;
    let before = ck.content_hash();
    // A PT fit on the loaded checkpoint leaves the in-memory weights untouched.
    let data = Dataset::load(&RunLayout::new(&runs.a).data()).map_err(err)?;
    let tok = data.tokenizer().map_err(err)?;
    let task = &data.target_data(&tok).map_err(err)?[0];
    let pt =
        PtTunable::init(&ck, &task.dataset_id, runs.cfg.baselines.prompt_len, 0).map_err(err)?;
    fit_fewshot(pt, &ck, task, 5, 3, &runs.cfg.adapt).map_err(err)?;
    ensure(
        s.ckpt_hash_before == s.ckpt_hash_after && before == ck.content_hash() && ck.frozen,
        format!(
            "file hash {:016x} -> {:016x}, content hash {:016x}",
            s.ckpt_hash_before, s.ckpt_hash_after, before
        ),
    )
}

fn c6_table2() -> Outcome {
    let tasks: Vec<String> = [
        "NER-UW",
        "NER-Opioid",
        "RE-UW",
        "RE-Opioid",
        "HEAD-QA",
        "MedBullets",
        "NLI-Sci",
        "NLI-Rad",
        "SUM-Rad",
        "SUM-MeQ",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: [(&str, [f64; 10], &str); 3] = [
        (
            "LLaMA 3.1 8B",
            [
                0.824, 0.868, 0.789, 0.850, 0.573, 0.616, 0.829, 0.773, 0.357, 0.432,
            ],
            "0.691",
        ),
        (
            "Meditron3 8B",
            [
                0.857, 0.895, 0.817, 0.875, 0.595, 0.643, 0.843, 0.803, 0.372, 0.454,
            ],
            "0.715",
        ),
        (
            "gpt-oss 20B",
            [
                0.871, 0.914, 0.835, 0.893, 0.644, 0.689, 0.865, 0.823, 0.391, 0.470,
            ],
            "0.739",
        ),
    ];
    let mut cells = Vec::new();
    let mut methods = Vec::new();
    for (m, vals, _) in &rows {
        methods.push((m.to_string(), None));
        for (t, v) in tasks.iter().zip(vals) {
            cells.push(Cell {
                method: m.to_string(),
                task: t.clone(),
                value: *v,
            });
        }
    }
    let report = aggregate_report(&cells, &methods, &tasks).map_err(err)?;
    let tsv = report.to_tsv();
    let mut got = Vec::new();
    let mut ok = true;
    for ((m, _, want), line) in rows.iter().zip(tsv.lines().skip(1)) {
        let avg = line.rsplit('\t').next().unwrap_or("");
        ok &= avg == *want;
        got.push(format!("{m} {avg} (want {want})"));
    }
    ensure(ok, got.join(", "))
}

fn c7_metrics() -> Outcome {
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    let f1 = micro_f1(&[set(&["a", "b", "x"])], &[set(&["a", "b", "y"])]).map_err(err)?;
    let rl = rouge_l("the cat", "the cat sat");
    let ma = macro_accuracy(&["x", "x", "x", "x"], &["x", "x", "y", "y"]).map_err(err)?;
    ensure(
        (f1 - 0.6667).abs() <= 1e-4 && (rl - 0.8).abs() <= 1e-4 && ma == 0.5,
        format!("micro_f1 {f1:.4}, rouge_l {rl:.4}, macro_accuracy {ma}"),
    )
}

fn c8_sampler() -> Outcome {
    let mut rng = seeds::rng(8);
    let mut counts = BTreeMap::new();
    for _ in 0..10_000 {
        *counts
            .entry(sample_tasks(&[2, 3, 4, 5], &mut rng).len())
            .or_insert(0usize) += 1;
    }
    let freqs: Vec<(usize, f64)> = (2..=5)
        .map(|k| (k, *counts.get(&k).unwrap_or(&0) as f64 / 10_000.0))
        .collect();
    ensure(
        counts.len() == 4 && freqs.iter().all(|(_, f)| (f - 0.25).abs() <= 0.02),
        freqs
            .iter()
            .map(|(k, f)| format!("K={k}: {f:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn c9_losses(runs: &Runs) -> Outcome {
    let s = &runs.summary_a;
    let mut ok = true;
    let mut parts = Vec::new();
    for (t, l) in &s.teacher_losses {
        ok &= l.len() >= 2 && l[l.len() - 1] < l[0];
        parts.push(format!("{t} {:.3}->{:.3}", l[0], l[l.len() - 1]));
    }
    let d = &s.distill_losses;
    ok &= s.teacher_losses.len() == TaskType::ALL.len() && d.len() >= 2 && d[d.len() - 1] < d[0];
    parts.push(format!("stage2 {:.3}->{:.3}", d[0], d[d.len() - 1]));
    ensure(ok, parts.join(", "))
}

fn c10_transfer(runs: &Runs) -> Outcome {
    let s = &runs.summary_a;
    let methods = [Method::Mpt, Method::Pt];
    let rows = aggregate_by_type(&s.fewshot.results, &methods, &runs.cfg.adapt.k_set);
    let mean = |m: Method, t: TaskType, k: usize| {
        rows.iter()
            .find(|r| r.0 == m && r.1 == t && r.2 == k)
            .map(|r| r.3)
    };
    let mut wins = 0;
    for t in TaskType::ALL {
        if let (Some(a), Some(b)) = (mean(Method::Mpt, t, 1), mean(Method::Pt, t, 1)) {
            wins += usize::from(a > b);
        }
    }
    let mut ok = wins >= 4;
    let mut parts = vec![format!("k=1 MPT>PT on {wins}/5 types")];
    for k in [0usize, 1, 5, 10, 20] {
        let avg = |m: Method| -> Option<f64> {
            let v: Option<Vec<f64>> = TaskType::ALL.iter().map(|&t| mean(m, t, k)).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        match (avg(Method::Mpt), avg(Method::Pt)) {
            (Some(a), Some(b)) => {
                if k > 0 {
                    ok &= a >= b;
                }
                parts.push(format!(
                    "k={k} {a:.3} vs {b:.3}{}",
                    if k == 0 { " (recorded)" } else { "" }
                ));
            }
            _ => {
                ok &= k == 0;
                parts.push(format!("k={k} missing"));
            }
        }
    }
    ok &= s.fewshot_seconds < 600.0;
    parts.push(format!("sweep {:.0}s", s.fewshot_seconds));
    ensure(ok, parts.join("; "))
}

fn c11_determinism(runs: &Runs) -> Outcome {
    let files = [
        "report.tsv",
        "fewshot/draws.csv",
        "fewshot/fewshot.csv",
        "fewshot/per_task.csv",
    ];
    for f in files {
        let a = std::fs::read(runs.a.join(f)).map_err(err)?;
        let b = std::fs::read(runs.b.join(f)).map_err(err)?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} files byte-identical", files.len()))
}

fn c12_protocol(runs: &Runs) -> Outcome {
    let s = &runs.summary_a;
    let cfg = &runs.cfg.adapt;
    let lay = RunLayout::new(&runs.a);
    let ck = BackboneCheckpoint::load(&lay.ckpt()).map_err(err)?;
    let distilled = load_distilled(&lay.distill()).map_err(err)?;
    let data = Dataset::load(&lay.data()).map_err(err)?;
    let tok = data.tokenizer().map_err(err)?;
    let task = &data.target_data(&tok).map_err(err)?[0];
    let init = MptTunable::init(&distilled, task, cfg.seed).map_err(err)?;
    let zero = fit_fewshot(init.clone(), &ck, task, 0, 5, cfg).map_err(err)?;
    let unchanged = zero.steps == 0 && zero.adapted.state_bytes() == init.state_bytes();
    let steps_ok = s
        .fewshot
        .draws
        .iter()
        .all(|d| d.steps == if d.k == 0 { 0 } else { 50 });
    let draws_ok = !s.fewshot.results.is_empty()
        && s.fewshot.results.iter().all(|r| {
            let (m, sd) = mean_std(&r.values);
            r.values.len() == 10 && m == r.mean && sd == r.std
        });
    let k_pos = s.fewshot.draws.iter().filter(|d| d.k > 0).count();
    ensure(
        unchanged && steps_ok && draws_ok,
        format!(
            "k=0 adapter unchanged: {unchanged}; {} draws, {k_pos} with k>=1 at 50 steps: {steps_ok}; 10 draws per cell: {draws_ok}",
            s.fewshot.draws.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let runs = full_runs();
    let with_runs = |f: fn(&Runs) -> Outcome| -> Outcome {
        match &runs {
            Ok(r) => f(r),
            Err(e) => Err(format!("desk runs failed: {e}")),
        }
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", c1_gradcheck()),
        ("composition identities", c2_identities()),
        ("parameter accounting", with_runs(c3_params)),
        ("compression equivalence", with_runs(c4_compression)),
        ("frozen backbone", with_runs(c5_frozen)),
        ("published averages", c6_table2()),
        ("metric oracles", c7_metrics()),
        ("sampler distribution", c8_sampler()),
        ("optimization sanity", with_runs(c9_losses)),
        ("transfer ordering", with_runs(c10_transfer)),
        ("determinism", with_runs(c11_determinism)),
        ("few-shot protocol", with_runs(c12_protocol)),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d})", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({d})", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
