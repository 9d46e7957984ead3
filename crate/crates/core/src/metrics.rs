//! Task metrics and the method × task report.

use std::collections::BTreeSet;
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskforge::TaskType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    MicroF1,
    Accuracy,
    MacroAccuracy,
    RougeL,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::MicroF1 => "micro_f1",
            MetricName::Accuracy => "accuracy",
            MetricName::MacroAccuracy => "macro_accuracy",
            MetricName::RougeL => "rouge_l",
        }
    }

    pub fn for_task(t: TaskType) -> Self {
        match t {
            TaskType::Ner | TaskType::Re => MetricName::MicroF1,
            TaskType::Qa => MetricName::Accuracy,
            TaskType::Nli => MetricName::MacroAccuracy,
            TaskType::Sum => MetricName::RougeL,
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Items recovered from one generated string.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Parsed {
    pub items: BTreeSet<String>,
    /// True when any segment could not be parsed and was dropped.
    pub malformed: bool,
}

/// Lenient parse of NER (`tok : TYPE ; ...`) or RE (single label) output.
pub fn parse_structured(text: &str, task: TaskType) -> Parsed {
    let mut out = Parsed::default();
    match task {
        TaskType::Re => {
            let toks: Vec<&str> = text.split_whitespace().collect();
            match toks.as_slice() {
                [] => {}
                [label] if !matches!(*label, ";" | ":") => {
                    out.items.insert(label.to_string());
                }
                _ => out.malformed = true,
            }
        }
        _ => {
            if text.trim().is_empty() {
                return out;
            }
            for seg in text.split(';') {
                let toks: Vec<&str> = seg.split_whitespace().collect();
                match toks.as_slice() {
                    [tok, ":", ty] if *tok != ":" && *ty != ":" => {
                        out.items.insert(format!("{tok} : {ty}"));
                    }
                    _ => out.malformed = true,
                }
            }
        }
    }
    out
}

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} references",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)` pooled over all examples; 1.0 when nothing is
/// predicted or expected anywhere.
pub fn micro_f1(pred: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> Result<f64> {
    same_len(pred, gold)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

pub fn accuracy<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<f64> {
    same_len(pred, gold)?;
    if gold.is_empty() {
        return Err(Error::contract("accuracy over zero examples"));
    }
    let hits = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref().trim() == g.as_ref().trim())
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Mean over gold classes of per-class recall.
pub fn macro_accuracy<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<f64> {
    same_len(pred, gold)?;
    if gold.is_empty() {
        return Err(Error::contract("macro_accuracy over zero examples"));
    }
    let classes: BTreeSet<&str> = gold.iter().map(|g| g.as_ref().trim()).collect();
    let mut sum = 0.0;
    for c in &classes {
        let (mut n, mut hit) = (0usize, 0usize);
        for (p, g) in pred.iter().zip(gold) {
            if g.as_ref().trim() == *c {
                n += 1;
                if p.as_ref().trim() == *c {
                    hit += 1;
                }
            }
        }
        sum += hit as f64 / n as f64;
    }
    Ok(sum / classes.len() as f64)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 over whitespace tokens.
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    match (h.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(&h, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / h.len() as f64;
    let rec = lcs / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub task: String,
    pub task_type: TaskType,
    pub metric: MetricName,
    pub value: f64,
    pub malformed_output_count: usize,
    pub n_examples: usize,
}

/// Scores generated strings against gold targets with the task's metric.
pub fn score_outputs(
    task: &str,
    task_type: TaskType,
    pred: &[String],
    gold: &[String],
) -> Result<EvalOutcome> {
    same_len(pred, gold)?;
    if gold.is_empty() {
        return Err(Error::contract(format!("no test examples for {task}")));
    }
    let metric = MetricName::for_task(task_type);
    let mut malformed = 0;
    let value = match metric {
        MetricName::MicroF1 => {
            let mut ps = Vec::with_capacity(pred.len());
            for p in pred {
                let parsed = parse_structured(p, task_type);
                malformed += parsed.malformed as usize;
                ps.push(parsed.items);
            }
            let gs: Vec<BTreeSet<String>> = gold
                .iter()
                .map(|g| parse_structured(g, task_type).items)
                .collect();
            micro_f1(&ps, &gs)?
        }
        MetricName::Accuracy => accuracy(pred, gold)?,
        MetricName::MacroAccuracy => macro_accuracy(pred, gold)?,
        MetricName::RougeL => {
            pred.iter()
                .zip(gold)
                .map(|(p, g)| rouge_l(p, g))
                .sum::<f64>()
                / gold.len() as f64
        }
    };
    Ok(EvalOutcome {
        task: task.to_string(),
        task_type,
        metric,
        value,
        malformed_output_count: malformed,
        n_examples: gold.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// Trainable share of the backbone's parameter count, in percent.
    pub params_pct: Option<f64>,
    /// One cell per report task; `None` prints as `NA`.
    pub values: Vec<Option<f64>>,
}

impl ReportRow {
    /// Mean of the present cells.
    pub fn avg(&self) -> Option<f64> {
        let present: Vec<f64> = self.values.iter().flatten().copied().collect();
        if present.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for v in &present {
            sum += v;
        }
        Some(sum / present.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub tasks: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"))
}

impl RunReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\tparams");
        for t in &self.tasks {
            out.push('\t');
            out.push_str(t);
        }
        out.push_str("\tavg\n");
        for r in &self.rows {
            out.push_str(&r.method);
            out.push('\t');
            out.push_str(&r.params_pct.map_or_else(|| "NA".to_string(), format_pct));
            for v in &r.values {
                out.push('\t');
                out.push_str(&cell(*v));
            }
            out.push('\t');
            out.push_str(&cell(r.avg()));
            out.push('\n');
        }
        out
    }
}

pub fn format_pct(p: f64) -> String {
    if p >= 1.0 {
        format!("{p:.1}%")
    } else {
        format!("{p:.3}%")
    }
}

/// One `(method, task, value)` observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: String,
    pub task: String,
    pub value: f64,
}

/// Builds the report grid in the given method and task order. Missing cells
/// are reported as `NA` and left out of the average.
pub fn aggregate_report(
    cells: &[Cell],
    methods: &[(String, Option<f64>)],
    tasks: &[String],
) -> Result<RunReport> {
    let mut rows = Vec::with_capacity(methods.len());
    for (m, pct) in methods {
        let mut values = Vec::with_capacity(tasks.len());
        for t in tasks {
            let hits: Vec<&Cell> = cells
                .iter()
                .filter(|c| &c.method == m && &c.task == t)
                .collect();
            match hits.as_slice() {
                [] => {
                    warn!("no value for method {m} on task {t}; reported as NA");
                    values.push(None);
                }
                [c] => {
                    if !(0.0..=1.0).contains(&c.value) {
                        return Err(Error::contract(format!(
                            "metric value {} outside [0,1]",
                            c.value
                        )));
                    }
                    values.push(Some(c.value));
                }
                _ => {
                    return Err(Error::contract(format!(
                        "duplicate value for method {m} on task {t}"
                    )))
                }
            }
        }
        rows.push(ReportRow {
            method: m.clone(),
            params_pct: *pct,
            values,
        });
    }
    Ok(RunReport {
        tasks: tasks.to_vec(),
        rows,
    })
}

/// Population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_examples() {
        let p = parse_structured("e3 : T1 ; e7 : T2", TaskType::Ner);
        assert_eq!(p.items, set(&["e3 : T1", "e7 : T2"]));
        assert!(!p.malformed);
        let p = parse_structured("", TaskType::Ner);
        assert!(p.items.is_empty() && !p.malformed);
        let p = parse_structured("e3 : ; garbage", TaskType::Ner);
        assert!(p.items.is_empty() && p.malformed);
        assert_eq!(parse_structured("rel2", TaskType::Re).items, set(&["rel2"]));
        assert!(parse_structured("rel2 rel1", TaskType::Re).malformed);
    }

    #[test]
    fn f1_examples() {
        let g = vec![set(&["a", "b", "c"])];
        assert_eq!(micro_f1(&g, &g).unwrap(), 1.0);
        let f = micro_f1(&[set(&["a", "b", "x"])], &g).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-4);
        assert!((f - 0.6667).abs() < 1e-4);
        assert_eq!(micro_f1(&[set(&[])], &g).unwrap(), 0.0);
        assert_eq!(micro_f1(&[set(&[])], &[set(&[])]).unwrap(), 1.0);
        assert!(micro_f1(&[], &g).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let gold = ["a", "a", "b"];
        let pred = ["a", "a", "a"];
        assert!((accuracy(&pred, &gold).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_accuracy(&pred, &gold).unwrap(), 0.5);
        assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
        assert_eq!(macro_accuracy(&gold, &gold).unwrap(), 1.0);
        let one = ["x", "x", "x", "x"];
        let p = ["x", "y", "x", "x"];
        assert_eq!(
            macro_accuracy(&p, &one).unwrap(),
            accuracy(&p, &one).unwrap()
        );
        assert!(accuracy(&["a"], &gold).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert!((rouge_l("the cat", "the cat sat") - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l("x y", "a b"), 0.0);
        assert_eq!(rouge_l("", ""), 1.0);
        assert_eq!(rouge_l("", "a"), 0.0);
    }

    fn tok_seq() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..8)
            .prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn rouge_symmetric_and_bounded(h in tok_seq(), r in tok_seq()) {
            let x = rouge_l(&h, &r);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, rouge_l(&r, &h));
            prop_assert_eq!(rouge_l(&h, &h), 1.0);
        }

        #[test]
        fn micro_f1_permutation_invariant(seed in any::<u64>()) {
            use rand::seq::{IndexedRandom, SliceRandom};
            let mut rng = crate::seeds::rng(seed);
            let universe = ["a", "b", "c", "d", "e"];
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> BTreeSet<String> {
                universe.choose_multiple(rng, 2).map(|s| s.to_string()).collect()
            };
            let pred: Vec<_> = (0..6).map(|_| mk(&mut rng)).collect();
            let gold: Vec<_> = (0..6).map(|_| mk(&mut rng)).collect();
            let base = micro_f1(&pred, &gold).unwrap();
            let mut idx: Vec<usize> = (0..6).collect();
            idx.shuffle(&mut rng);
            let p2: Vec<_> = idx.iter().map(|&i| pred[i].clone()).collect();
            let g2: Vec<_> = idx.iter().map(|&i| gold[i].clone()).collect();
            prop_assert_eq!(base, micro_f1(&p2, &g2).unwrap());
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn score_outputs_counts_malformed() {
        let pred = vec!["e1 : T1".to_string(), "e1 : ; x".to_string()];
        let gold = vec!["e1 : T1".to_string(), "e2 : T2".to_string()];
        let o = score_outputs("t", TaskType::Ner, &pred, &gold).unwrap();
        assert_eq!(o.malformed_output_count, 1);
        assert!((o.value - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(o.metric, MetricName::MicroF1);
        let line = serde_json::to_string(&o).unwrap();
        assert!(line.contains("\"metric\":\"micro_f1\""));
    }

    fn report_for(values: &[f64]) -> RunReport {
        let tasks: Vec<String> = (0..values.len()).map(|i| format!("t{i}")).collect();
        let cells: Vec<Cell> = values
            .iter()
            .zip(&tasks)
            .map(|(v, t)| Cell {
                method: "MPT".into(),
                task: t.clone(),
                value: *v,
            })
            .collect();
        aggregate_report(&cells, &[("MPT".into(), None)], &tasks).unwrap()
    }

    fn avg_cell(r: &RunReport) -> String {
        r.to_tsv()
            .lines()
            .nth(1)
            .unwrap()
            .rsplit('\t')
            .next()
            .unwrap()
            .to_string()
    }

    #[test]
    fn report_reproduces_published_averages() {
        let llama = [
            0.824, 0.868, 0.789, 0.850, 0.573, 0.616, 0.829, 0.773, 0.357, 0.432,
        ];
        let meditron = [
            0.857, 0.895, 0.817, 0.875, 0.595, 0.643, 0.843, 0.803, 0.372, 0.454,
        ];
        assert_eq!(avg_cell(&report_for(&llama)), "0.691");
        assert_eq!(avg_cell(&report_for(&meditron)), "0.715");
    }

    #[test]
    fn report_na_and_constant_rows() {
        assert_eq!(avg_cell(&report_for(&[0.4; 6])), "0.400");
        let tasks = vec!["a".to_string(), "b".to_string()];
        let cells = vec![Cell {
            method: "PT".into(),
            task: "a".into(),
            value: 0.5,
        }];
        let r = aggregate_report(&cells, &[("PT".into(), Some(0.25))], &tasks).unwrap();
        assert_eq!(
            r.to_tsv(),
            "method\tparams\ta\tb\tavg\nPT\t0.250%\t0.500\tNA\t0.500\n"
        );
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[0.3; 10]).1, 0.0);
    }
}
