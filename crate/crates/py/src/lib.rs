//! Python bindings: prompt composition, parameter accounting, metrics,
//! checkpoints and artifacts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mpt_core::backbone::BackboneCheckpoint;
use mpt_core::baselines::load_artifact;
use mpt_core::ndtensor::Tensor;
use mpt_core::promptkit::{
    self, ParamMode, PromptArtifact, SharedMetaPrompt, TargetAdapter, TaskFactors,
};
use mpt_core::taskforge::TaskType;
use mpt_core::{metrics, verify, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) | Error::GradientMismatch { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f32>]) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::new(&[r, c], rows.concat()).map_err(py_err)
}

fn vector(xs: &[f32]) -> PyResult<Tensor> {
    Tensor::new(&[xs.len()], xs.to_vec()).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f32>> {
    t.data()
        .chunks(t.cols().max(1))
        .map(<[f32]>::to_vec)
        .collect()
}

fn task_type(s: &str) -> PyResult<TaskType> {
    s.parse().map_err(py_err)
}

/// Trainable prompt parameters; `mode` is adaptation, per_task_total or group_total.
#[pyfunction]
#[pyo3(name = "param_count")]
fn py_param_count(l: i64, d: i64, tau: i64, mode: &str) -> PyResult<u64> {
    let mode: ParamMode = mode.parse().map_err(py_err)?;
    promptkit::param_count(l, d, tau, mode).map_err(py_err)
}

/// `P* ⊙ (U·V)`.
#[pyfunction]
fn compose_prompt(
    p_star: Vec<Vec<f32>>,
    u: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
) -> PyResult<Vec<Vec<f32>>> {
    let meta = SharedMetaPrompt {
        p_star: matrix(&p_star)?,
    };
    let f = TaskFactors {
        task_type: TaskType::Ner,
        u: matrix(&u)?,
        v: matrix(&v)?,
    };
    f.validate().map_err(py_err)?;
    Ok(to_rows(
        &promptkit::compose_prompt(&meta, &f).map_err(py_err)?,
    ))
}

/// `P* ⊙ (u ⊗ v)`.
#[pyfunction]
fn compose_target_prompt(
    p_star: Vec<Vec<f32>>,
    u: Vec<f32>,
    v: Vec<f32>,
) -> PyResult<Vec<Vec<f32>>> {
    let meta = SharedMetaPrompt {
        p_star: matrix(&p_star)?,
    };
    let a = TargetAdapter {
        target_task: String::new(),
        source_type: TaskType::Ner,
        u: vector(&u)?,
        v: vector(&v)?,
    };
    Ok(to_rows(
        &promptkit::compose_target_prompt(&meta, &a).map_err(py_err)?,
    ))
}

#[pyfunction]
fn micro_f1(pred: Vec<Vec<String>>, gold: Vec<Vec<String>>) -> PyResult<f64> {
    let sets = |xs: Vec<Vec<String>>| {
        xs.into_iter()
            .map(|x| x.into_iter().collect())
            .collect::<Vec<_>>()
    };
    metrics::micro_f1(&sets(pred), &sets(gold)).map_err(py_err)
}

#[pyfunction]
fn rouge_l(hyp: &str, reference: &str) -> f64 {
    metrics::rouge_l(hyp, reference)
}

#[pyfunction]
fn macro_accuracy(pred: Vec<String>, gold: Vec<String>) -> PyResult<f64> {
    metrics::macro_accuracy(&pred, &gold).map_err(py_err)
}

/// Scores generated strings with the metric of `task_type`; returns `(metric, value, malformed)`.
#[pyfunction]
fn score(task_type: &str, pred: Vec<String>, gold: Vec<String>) -> PyResult<(String, f64, usize)> {
    let t = self::task_type(task_type)?;
    let o = metrics::score_outputs("python", t, &pred, &gold).map_err(py_err)?;
    Ok((
        o.metric.as_str().to_string(),
        o.value,
        o.malformed_output_count,
    ))
}

/// Runs the finite-difference suite; returns the largest relative error.
#[pyfunction]
fn gradcheck() -> PyResult<f64> {
    Ok(verify::run_gradcheck_suite().map_err(py_err)?.max_rel_error)
}

/// A frozen backbone checkpoint.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    ck: BackboneCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            ck: BackboneCheckpoint::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn content_hash(&self) -> u64 {
        self.ck.content_hash()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.ck.d_model()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.ck.tokenizer.tokens().to_vec()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.ck.weights.param_count()
    }

    /// Greedy continuation of `input` (an example input, without the answer marker).
    #[pyo3(signature = (input, prompt=None, max_new=64))]
    fn generate(
        &self,
        input: &str,
        prompt: Option<Vec<Vec<f32>>>,
        max_new: usize,
    ) -> PyResult<String> {
        let tok = &self.ck.tokenizer;
        let ex = tok.encode_example(input, "").map_err(py_err)?;
        let p = prompt.map(|p| matrix(&p)).transpose()?;
        let out = self
            .ck
            .generate_greedy(p.as_ref(), None, &ex.input_ids, max_new)
            .map_err(py_err)?;
        tok.decode_generated(&out).map_err(py_err)
    }

    /// Greedy continuation under a saved adapter, LoRA or prompt artifact.
    /// MPT adapters also need the distilled `meta.prompt`.
    #[pyo3(signature = (artifact, input, meta=None, max_new=64))]
    fn generate_with(
        &self,
        artifact: PathBuf,
        input: &str,
        meta: Option<PathBuf>,
        max_new: usize,
    ) -> PyResult<String> {
        use mpt_core::adapter::{generate_all, AnyTunable};
        let meta = meta
            .map(|p| SharedMetaPrompt::load(&p))
            .transpose()
            .map_err(py_err)?;
        let art = load_artifact(&artifact, meta.as_ref()).map_err(py_err)?;
        let tok = &self.ck.tokenizer;
        let ex = tok.encode_example(input, "").map_err(py_err)?;
        let t: AnyTunable = art.tunable;
        let out = generate_all(&t, &self.ck, &[&ex.input_ids], max_new).map_err(py_err)?;
        tok.decode_generated(&out[0]).map_err(py_err)
    }
}

#[pymodule]
fn mpt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(py_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(compose_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(compose_target_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(micro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(macro_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
