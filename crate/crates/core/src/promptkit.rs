//! Prompt containers, Hadamard composition, initialization and accounting.

use std::path::Path;

use log::warn;
use rand::Rng;

use crate::backbone::BackboneCheckpoint;
use crate::container::PromptFile;
use crate::error::{Error, Result};
use crate::ndtensor::{Float, Graph, Tensor, Var};
use crate::seeds;
use crate::taskforge::TaskType;

pub const POWER_ITERATIONS: usize = 50;
pub const POWER_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherPrompt<E: Float = f32> {
    pub task_type: TaskType,
    /// `L × d`.
    pub prompt: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedMetaPrompt<E: Float = f32> {
    pub p_star: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFactors<E: Float = f32> {
    pub task_type: TaskType,
    /// `L × r`.
    pub u: Tensor<E>,
    /// `r × d`.
    pub v: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAdapter<E: Float = f32> {
    pub target_task: String,
    pub source_type: TaskType,
    /// Length `L`.
    pub u: Tensor<E>,
    /// Length `d`.
    pub v: Tensor<E>,
}

impl<E: Float> TeacherPrompt<E> {
    pub fn len(&self) -> usize {
        self.prompt.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt.numel() == 0
    }
}

/// Largest rank allowed for an `L × d` factorization (always at least 1).
pub fn max_rank(l: usize, d: usize) -> usize {
    (l.min(d) / 2).max(1)
}

impl<E: Float> TaskFactors<E> {
    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.shape().len() != 2 || self.v.shape().len() != 2 || self.u.cols() != self.v.rows()
        {
            return Err(Error::Dimension {
                op: "task_factors",
                lhs: self.u.shape().to_vec(),
                rhs: self.v.shape().to_vec(),
            });
        }
        let (l, r, d) = (self.u.rows(), self.u.cols(), self.v.cols());
        if r > max_rank(l, d) {
            return Err(Error::contract(format!(
                "factor rank {r} exceeds min(L,d)/2 for L={l}, d={d}"
            )));
        }
        Ok(())
    }

    /// `1/sqrt(r) + N(0, noise)` entries so that `U·V ≈ 1`.
    pub fn near_identity(
        task_type: TaskType,
        l: usize,
        d: usize,
        r: usize,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if r == 0 || r > max_rank(l, d) {
            return Err(Error::contract(format!(
                "factor rank {r} not in 1..={}",
                max_rank(l, d)
            )));
        }
        let mut rng = seeds::rng(seeds::mix_str(
            seed,
            &format!("factors-{}", task_type.as_str()),
        ));
        let c = 1.0 / (r as f64).sqrt();
        let u = Tensor::randn(&[l, r], c, noise, &mut rng)?.with_requires_grad(true);
        let v = Tensor::randn(&[r, d], c, noise, &mut rng)?.with_requires_grad(true);
        Ok(TaskFactors { task_type, u, v })
    }
}

impl<E: Float> TargetAdapter<E> {
    pub fn trainable_scalars(&self) -> usize {
        self.u.numel() + self.v.numel()
    }
}

/// Each row is a copy of a uniformly drawn (with replacement) embedding row.
pub fn init_prompt_from_vocab<E: Float>(
    ck: &BackboneCheckpoint<E>,
    l: usize,
    seed: u64,
) -> Result<Tensor<E>> {
    if l == 0 {
        return Err(Error::contract("prompt length must be positive"));
    }
    if l >= ck.config.max_seq_len {
        return Err(Error::Length {
            len: l,
            max: ck.config.max_seq_len - 1,
        });
    }
    let mut rng = seeds::rng(seeds::mix_str(seed, "prompt-init"));
    let emb = &ck.weights.tok_emb;
    let d = emb.cols();
    let mut data = Vec::with_capacity(l * d);
    for _ in 0..l {
        let row = rng.random_range(0..emb.rows());
        data.extend_from_slice(emb.row(row));
    }
    Tensor::new(&[l, d], data)
}

/// `P* ⊙ (U·V)` on the graph.
pub fn compose_prompt_var<E: Float>(g: &mut Graph<E>, p_star: Var, u: Var, v: Var) -> Result<Var> {
    let m = g.matmul(u, v)?;
    g.hadamard(p_star, m)
}

/// `P* ⊙ (u ⊗ v)` on the graph, routed through the rank-1 matmul so it is
/// bit-identical to [`compose_prompt_var`] with `U = u`, `V = vᵀ`.
pub fn compose_target_var<E: Float>(g: &mut Graph<E>, p_star: Var, u: Var, v: Var) -> Result<Var> {
    let l = g.value(u).len();
    let d = g.value(v).len();
    let uc = g.reshape(u, &[l, 1])?;
    let vr = g.reshape(v, &[1, d])?;
    compose_prompt_var(g, p_star, uc, vr)
}

pub fn compose_prompt<E: Float>(
    meta: &SharedMetaPrompt<E>,
    f: &TaskFactors<E>,
) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let (p, u, v) = (g.leaf(&meta.p_star), g.leaf(&f.u), g.leaf(&f.v));
    let out = compose_prompt_var(&mut g, p, u, v)?;
    Ok(g.to_tensor(out))
}

pub fn compose_target_prompt<E: Float>(
    meta: &SharedMetaPrompt<E>,
    a: &TargetAdapter<E>,
) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let (p, u, v) = (g.leaf(&meta.p_star), g.leaf(&a.u), g.leaf(&a.v));
    let out = compose_target_var(&mut g, p, u, v)?;
    Ok(g.to_tensor(out))
}

/// Materializes the adapted prompt once for deployment.
pub fn compress_adapter<E: Float>(
    meta: &SharedMetaPrompt<E>,
    a: &TargetAdapter<E>,
) -> Result<Tensor<E>> {
    compose_target_prompt(meta, a)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitReport {
    pub sigma: f64,
    pub converged: bool,
}

/// Stage-3 initialization from the source factors. Rank 1 copies them;
/// higher ranks take the top singular triple of `U·V` by power iteration.
pub fn init_target_adapter<E: Float>(
    factors: &TaskFactors<E>,
    target_task: &str,
    seed: u64,
) -> Result<(TargetAdapter<E>, InitReport)> {
    factors.validate()?;
    let (l, r, d) = (factors.u.rows(), factors.rank(), factors.v.cols());
    if r == 1 {
        let u = Tensor::new(&[l], factors.u.data().to_vec())?.with_requires_grad(true);
        let v = Tensor::new(&[d], factors.v.data().to_vec())?.with_requires_grad(true);
        let sigma = 0.0;
        let a = TargetAdapter {
            target_task: target_task.to_string(),
            source_type: factors.task_type,
            u,
            v,
        };
        return Ok((
            a,
            InitReport {
                sigma,
                converged: true,
            },
        ));
    }
    let uf: Vec<f64> = factors.u.data().iter().map(|x| x.as_f64()).collect();
    let vf: Vec<f64> = factors.v.data().iter().map(|x| x.as_f64()).collect();
    let mut m = vec![0.0; l * d];
    crate::ndtensor::kernels::matmul_nn(&uf, &vf, l, r, d, &mut m);
    let (sigma, a, b, converged) = top_singular(&m, l, d, seed);
    if !converged {
        warn!("power iteration did not converge within {POWER_ITERATIONS} iterations; using last iterate");
    }
    let s = sigma.sqrt();
    let u: Vec<f64> = a.iter().map(|x| x * s).collect();
    let v: Vec<f64> = b.iter().map(|x| x * s).collect();
    let adapter = TargetAdapter {
        target_task: target_task.to_string(),
        source_type: factors.task_type,
        u: Tensor::from_f64_slice(&[l], &u)?.with_requires_grad(true),
        v: Tensor::from_f64_slice(&[d], &v)?.with_requires_grad(true),
    };
    Ok((adapter, InitReport { sigma, converged }))
}

/// Top singular triple `(σ, a, b)` of the row-major `l × d` matrix `m`.
pub fn top_singular(m: &[f64], l: usize, d: usize, seed: u64) -> (f64, Vec<f64>, Vec<f64>, bool) {
    let mut rng = seeds::rng(seeds::mix_str(seed, "power-iteration"));
    let mut b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut b);
    let mut a = vec![0.0; l];
    let mut sigma = 0.0;
    let mut converged = false;
    for _ in 0..POWER_ITERATIONS {
        for i in 0..l {
            a[i] = (0..d).map(|j| m[i * d + j] * b[j]).sum();
        }
        if normalize(&mut a) == 0.0 {
            return (0.0, a, b, true);
        }
        for j in 0..d {
            b[j] = (0..l).map(|i| m[i * d + j] * a[i]).sum();
        }
        let s = normalize(&mut b);
        let change = (s - sigma).abs() / s.max(f64::MIN_POSITIVE);
        sigma = s;
        converged = change <= POWER_TOL;
    }
    (sigma, a, b, converged)
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// Scalars updated in Stage 3.
    Adaptation,
    /// `P*` plus one adapter.
    PerTaskTotal,
    /// `P*` shared by `tau` adapters.
    GroupTotal,
}

impl std::str::FromStr for ParamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptation" => Ok(ParamMode::Adaptation),
            "per_task_total" => Ok(ParamMode::PerTaskTotal),
            "group_total" => Ok(ParamMode::GroupTotal),
            _ => Err(Error::contract(format!("unknown param-count mode {s:?}"))),
        }
    }
}

pub fn param_count(l: i64, d: i64, tau: i64, mode: ParamMode) -> Result<u64> {
    if l <= 0 || d <= 0 || tau <= 0 {
        return Err(Error::contract(format!(
            "param_count needs positive L, d, tau; got {l}, {d}, {tau}"
        )));
    }
    let (l, d, tau) = (l as u64, d as u64, tau as u64);
    Ok(match mode {
        ParamMode::Adaptation => l + d,
        ParamMode::PerTaskTotal => l * d + l + d,
        ParamMode::GroupTotal => l * d + (l + d) * tau,
    })
}

/// Read/write through the one-line-header prompt file format.
pub trait PromptArtifact: Sized {
    fn to_file(&self) -> PromptFile;
    fn from_file(f: &PromptFile) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_file(&PromptFile::load(path)?)
    }
}

fn header(
    kind: &str,
    task: Option<TaskType>,
    l: usize,
    d: usize,
    r: usize,
) -> Vec<(&'static str, String)> {
    vec![
        ("kind", kind.to_string()),
        (
            "task_type",
            task.map_or("none".to_string(), |t| t.as_str().to_string()),
        ),
        ("L", l.to_string()),
        ("d", d.to_string()),
        ("r", r.to_string()),
    ]
}

fn expect_kind(f: &PromptFile, kind: &str, tensors: usize) -> Result<(usize, usize)> {
    if f.field("kind")? != kind {
        return Err(Error::format(format!(
            "expected a {kind} prompt file, found {}",
            f.field("kind")?
        )));
    }
    if f.tensors.len() != tensors {
        return Err(Error::format(format!(
            "{kind} file holds {} tensors, expected {tensors}",
            f.tensors.len()
        )));
    }
    let parse = |k: &str| -> Result<usize> {
        f.field(k)?
            .parse()
            .map_err(|_| Error::format(format!("bad {k} in prompt header")))
    };
    Ok((parse("L")?, parse("d")?))
}

fn task_field(f: &PromptFile) -> Result<TaskType> {
    f.field("task_type")?
        .parse()
        .map_err(|e: Error| Error::format(e.to_string()))
}

fn check_shape(t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::format(format!(
            "prompt tensor shape {:?}, header says {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl PromptArtifact for TeacherPrompt {
    fn to_file(&self) -> PromptFile {
        let h = header(
            "teacher",
            Some(self.task_type),
            self.prompt.rows(),
            self.prompt.cols(),
            0,
        );
        PromptFile::new(&h, vec![self.prompt.clone()])
    }

    fn from_file(f: &PromptFile) -> Result<Self> {
        let (l, d) = expect_kind(f, "teacher", 1)?;
        check_shape(&f.tensors[0], &[l, d])?;
        Ok(TeacherPrompt {
            task_type: task_field(f)?,
            prompt: f.tensors[0].clone(),
        })
    }
}

impl PromptArtifact for SharedMetaPrompt {
    fn to_file(&self) -> PromptFile {
        let h = header("meta", None, self.p_star.rows(), self.p_star.cols(), 0);
        PromptFile::new(&h, vec![self.p_star.clone()])
    }

    fn from_file(f: &PromptFile) -> Result<Self> {
        let (l, d) = expect_kind(f, "meta", 1)?;
        check_shape(&f.tensors[0], &[l, d])?;
        Ok(SharedMetaPrompt {
            p_star: f.tensors[0].clone(),
        })
    }
}

impl PromptArtifact for TaskFactors {
    fn to_file(&self) -> PromptFile {
        let h = header(
            "factors",
            Some(self.task_type),
            self.u.rows(),
            self.v.cols(),
            self.rank(),
        );
        PromptFile::new(&h, vec![self.u.clone(), self.v.clone()])
    }

    fn from_file(f: &PromptFile) -> Result<Self> {
        let (l, d) = expect_kind(f, "factors", 2)?;
        let r: usize = f
            .field("r")?
            .parse()
            .map_err(|_| Error::format("bad r in prompt header"))?;
        check_shape(&f.tensors[0], &[l, r])?;
        check_shape(&f.tensors[1], &[r, d])?;
        let out = TaskFactors {
            task_type: task_field(f)?,
            u: f.tensors[0].clone(),
            v: f.tensors[1].clone(),
        };
        out.validate()?;
        Ok(out)
    }
}

impl PromptArtifact for TargetAdapter {
    fn to_file(&self) -> PromptFile {
        let h = header(
            "adapter",
            Some(self.source_type),
            self.u.numel(),
            self.v.numel(),
            1,
        );
        PromptFile::new(&h, vec![self.u.clone(), self.v.clone()])
    }

    fn from_file(f: &PromptFile) -> Result<Self> {
        let (l, d) = expect_kind(f, "adapter", 2)?;
        check_shape(&f.tensors[0], &[l])?;
        check_shape(&f.tensors[1], &[d])?;
        Ok(TargetAdapter {
            target_task: String::new(),
            source_type: task_field(f)?,
            u: f.tensors[0].clone(),
            v: f.tensors[1].clone(),
        })
    }
}

/// A deployed `L × d` prompt produced by [`compress_adapter`].
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedPrompt {
    pub source_type: TaskType,
    pub prompt: Tensor,
}

impl PromptArtifact for CompressedPrompt {
    fn to_file(&self) -> PromptFile {
        let h = header(
            "compressed",
            Some(self.source_type),
            self.prompt.rows(),
            self.prompt.cols(),
            0,
        );
        PromptFile::new(&h, vec![self.prompt.clone()])
    }

    fn from_file(f: &PromptFile) -> Result<Self> {
        let (l, d) = expect_kind(f, "compressed", 1)?;
        check_shape(&f.tensors[0], &[l, d])?;
        Ok(CompressedPrompt {
            source_type: task_field(f)?,
            prompt: f.tensors[0].clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn compose_hand_example() {
        let meta = SharedMetaPrompt {
            p_star: t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
        };
        let f = TaskFactors {
            task_type: TaskType::Ner,
            u: t(&[2, 1], &[1.0, 2.0]),
            v: t(&[1, 2], &[1.0, 0.0]),
        };
        assert_eq!(
            compose_prompt(&meta, &f).unwrap().data(),
            &[1.0, 0.0, 6.0, 0.0]
        );
    }

    #[test]
    fn target_hand_example_and_identity() {
        let meta = SharedMetaPrompt {
            p_star: Tensor::<f64>::ones(&[2, 2]).unwrap(),
        };
        let a = TargetAdapter {
            target_task: "x".into(),
            source_type: TaskType::Re,
            u: t(&[2], &[1.0, 2.0]),
            v: t(&[2], &[3.0, 4.0]),
        };
        assert_eq!(
            compose_target_prompt(&meta, &a).unwrap().data(),
            &[3.0, 4.0, 6.0, 8.0]
        );

        let mut rng = seeds::rng(1);
        let p = Tensor::<f64>::randn(&[3, 4], 0.0, 1.0, &mut rng).unwrap();
        let meta = SharedMetaPrompt { p_star: p.clone() };
        let ones = TargetAdapter {
            target_task: "x".into(),
            source_type: TaskType::Re,
            u: Tensor::ones(&[3]).unwrap(),
            v: Tensor::ones(&[4]).unwrap(),
        };
        assert!(compose_target_prompt(&meta, &ones).unwrap().bits_eq(&p));
        let f = TaskFactors {
            task_type: TaskType::Qa,
            u: Tensor::ones(&[3, 1]).unwrap(),
            v: Tensor::ones(&[1, 4]).unwrap(),
        };
        assert!(compose_prompt(&meta, &f).unwrap().bits_eq(&p));
    }

    #[test]
    fn dimension_mismatch() {
        let meta = SharedMetaPrompt {
            p_star: Tensor::<f64>::ones(&[2, 3]).unwrap(),
        };
        let f = TaskFactors {
            task_type: TaskType::Ner,
            u: Tensor::ones(&[2, 1]).unwrap(),
            v: Tensor::ones(&[1, 2]).unwrap(),
        };
        assert!(matches!(
            compose_prompt(&meta, &f),
            Err(Error::Dimension { .. })
        ));
    }

    proptest! {
        #[test]
        fn target_equals_rank1_compose(seed in any::<u64>(), l in 1usize..6, d in 1usize..6) {
            let mut rng = seeds::rng(seed);
            let p = Tensor::<f32>::randn(&[l, d], 0.0, 1.0, &mut rng).unwrap();
            let u = Tensor::<f32>::randn(&[l], 0.0, 1.0, &mut rng).unwrap();
            let v = Tensor::<f32>::randn(&[d], 0.0, 1.0, &mut rng).unwrap();
            let meta = SharedMetaPrompt { p_star: p };
            let a = TargetAdapter { target_task: "t".into(), source_type: TaskType::Sum, u: u.clone(), v: v.clone() };
            let f = TaskFactors { task_type: TaskType::Sum, u: u.reshape(&[l, 1]).unwrap(), v: v.reshape(&[1, d]).unwrap() };
            prop_assert!(compose_target_prompt(&meta, &a).unwrap().bits_eq(&compose_prompt(&meta, &f).unwrap()));
        }
    }

    #[test]
    fn rank1_init_is_exact_copy() {
        let mut rng = seeds::rng(2);
        let f = TaskFactors::<f32> {
            task_type: TaskType::Nli,
            u: Tensor::randn(&[4, 1], 0.0, 1.0, &mut rng).unwrap(),
            v: Tensor::randn(&[1, 6], 0.0, 1.0, &mut rng).unwrap(),
        };
        let meta = SharedMetaPrompt {
            p_star: Tensor::randn(&[4, 6], 0.0, 1.0, &mut rng).unwrap(),
        };
        let (a, rep) = init_target_adapter(&f, "tgt", 9).unwrap();
        assert!(rep.converged);
        assert_eq!(a.trainable_scalars(), 10);
        assert!(compose_target_prompt(&meta, &a)
            .unwrap()
            .bits_eq(&compose_prompt(&meta, &f).unwrap()));
    }

    #[test]
    fn rank2_with_rank1_product_reconstructs() {
        let mut rng = seeds::rng(3);
        let mut u = Tensor::<f64>::randn(&[4, 2], 0.0, 1.0, &mut rng).unwrap();
        for i in 0..4 {
            u.data_mut()[i * 2 + 1] = 0.0;
        }
        let v = Tensor::<f64>::randn(&[2, 4], 0.0, 1.0, &mut rng).unwrap();
        let f = TaskFactors {
            task_type: TaskType::Ner,
            u,
            v,
        };
        let (a, rep) = init_target_adapter(&f, "t", 4).unwrap();
        assert!(rep.converged);
        let mut m = vec![0.0; 16];
        crate::ndtensor::kernels::matmul_nn(f.u.data(), f.v.data(), 4, 2, 4, &mut m);
        for i in 0..4 {
            for j in 0..4 {
                assert!((a.u.data()[i] * a.v.data()[j] - m[i * 4 + j]).abs() < 1e-6);
            }
        }
    }

    /// Best rank-1 error from the eigen-decomposition of MᵀM by Jacobi sweeps.
    fn best_rank1_error(m: &[f64], n: usize) -> f64 {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum();
            }
        }
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let tt = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let tt = if theta == 0.0 { 1.0 } else { tt };
                    let c = 1.0 / (tt * tt + 1.0).sqrt();
                    let s = tt * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i].max(0.0)).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        eig[1..].iter().sum::<f64>().sqrt()
    }

    #[test]
    fn power_iteration_matches_dense_svd_bound() {
        for seed in 0..5 {
            let mut rng = seeds::rng(100 + seed);
            let f = TaskFactors::<f64> {
                task_type: TaskType::Qa,
                u: Tensor::randn(&[4, 2], 0.0, 1.0, &mut rng).unwrap(),
                v: Tensor::randn(&[2, 4], 0.0, 1.0, &mut rng).unwrap(),
            };
            let (a, _) = init_target_adapter(&f, "t", seed).unwrap();
            let mut m = vec![0.0; 16];
            crate::ndtensor::kernels::matmul_nn(f.u.data(), f.v.data(), 4, 2, 4, &mut m);
            let err: f64 = (0..16)
                .map(|k| (m[k] - a.u.data()[k / 4] * a.v.data()[k % 4]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err <= best_rank1_error(&m, 4) + 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn rank_limits() {
        assert!(TaskFactors::<f32>::near_identity(TaskType::Ner, 8, 32, 4, 0.01, 1).is_ok());
        assert!(TaskFactors::<f32>::near_identity(TaskType::Ner, 8, 32, 5, 0.01, 1).is_err());
        assert!(TaskFactors::<f32>::near_identity(TaskType::Ner, 1, 32, 1, 0.01, 1).is_ok());
        let f = TaskFactors::<f64>::near_identity(TaskType::Re, 6, 8, 2, 0.0, 1).unwrap();
        let meta = SharedMetaPrompt {
            p_star: Tensor::ones(&[6, 8]).unwrap(),
        };
        for x in compose_prompt(&meta, &f).unwrap().data() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(8, 32, 1, ParamMode::Adaptation).unwrap(), 40);
        assert_eq!(param_count(8, 32, 1, ParamMode::PerTaskTotal).unwrap(), 296);
        assert_eq!(param_count(8, 32, 10, ParamMode::GroupTotal).unwrap(), 656);
        assert!(matches!(
            param_count(0, 32, 1, ParamMode::Adaptation),
            Err(Error::Contract(_))
        ));
        assert!(param_count(8, -1, 1, ParamMode::GroupTotal).is_err());
    }

    #[test]
    fn artifact_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeds::rng(7);
        let f = TaskFactors::<f32>::near_identity(TaskType::Sum, 4, 6, 2, 0.01, 3).unwrap();
        let p = f.to_file().to_bytes();
        f.save(&dir.path().join("f.prompt")).unwrap();
        let back = TaskFactors::load(&dir.path().join("f.prompt")).unwrap();
        assert_eq!(back.to_file().to_bytes(), p);

        let c = CompressedPrompt {
            source_type: TaskType::Ner,
            prompt: Tensor::randn(&[4, 6], 0.0, 1.0, &mut rng).unwrap(),
        };
        let path = dir.path().join("c.prompt");
        c.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let hdr = b"kind=compressed task_type=NER L=4 d=6 r=0\n";
        assert!(bytes.starts_with(hdr));
        assert_eq!(bytes.len(), hdr.len() + 6 + 2 * 8 + 4 * 6 * 4);
        assert_eq!(CompressedPrompt::load(&path).unwrap(), c);

        let m = SharedMetaPrompt {
            p_star: c.prompt.clone(),
        };
        assert!(m
            .to_file()
            .to_bytes()
            .starts_with(b"kind=meta task_type=none L=4 d=6 r=0\n"));
        assert!(TeacherPrompt::from_file(&m.to_file()).is_err());
    }

    fn tiny_backbone() -> BackboneCheckpoint<f32> {
        use crate::backbone::{BackboneConfig, Tokenizer};
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
        BackboneCheckpoint::random(cfg, tok, 5).unwrap()
    }

    #[test]
    fn vocab_init_copies_embedding_rows() {
        let ck = tiny_backbone();
        let p = init_prompt_from_vocab(&ck, 6, 11).unwrap();
        assert_eq!(p.shape(), &[6, 8]);
        for r in 0..6 {
            assert!((0..16).any(|k| ck.weights.tok_emb.row(k) == p.row(r)));
        }
        assert!(init_prompt_from_vocab(&ck, 6, 11).unwrap().bits_eq(&p));
        assert!(init_prompt_from_vocab(&ck, 0, 11).is_err());
    }

    #[test]
    fn compressed_prompt_gives_identical_logits() {
        let ck = tiny_backbone();
        let mut rng = seeds::rng(21);
        let meta = SharedMetaPrompt {
            p_star: init_prompt_from_vocab(&ck, 4, 1).unwrap(),
        };
        let adapter = TargetAdapter {
            target_task: "t".into(),
            source_type: TaskType::Ner,
            u: Tensor::randn(&[4], 1.0, 0.3, &mut rng)
                .unwrap()
                .with_requires_grad(true),
            v: Tensor::randn(&[8], 1.0, 0.3, &mut rng)
                .unwrap()
                .with_requires_grad(true),
        };
        let compressed = compress_adapter(&meta, &adapter).unwrap();
        for _ in 0..20 {
            let n = rng.random_range(2..10);
            let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..16)).collect();
            let mut g = Graph::new();
            let b = ck.bind(&mut g, false);
            let (p, u, v) = (g.leaf(&meta.p_star), g.leaf(&adapter.u), g.leaf(&adapter.v));
            let live = compose_target_var(&mut g, p, u, v).unwrap();
            let (l1, _) = ck.forward(&mut g, &b, Some(live), &tokens, None).unwrap();
            let c = g.leaf(&compressed);
            let (l2, _) = ck.forward(&mut g, &b, Some(c), &tokens, None).unwrap();
            assert!(g.to_tensor(l1).bits_eq(&g.to_tensor(l2)));
        }
    }
}
