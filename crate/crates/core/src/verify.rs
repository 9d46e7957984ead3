//! Finite-difference verification of every differentiable operation, the
//! prompt compositions, the distillation loss and a full backbone pass.

use std::time::Instant;

use crate::backbone::{BackboneCheckpoint, BackboneConfig, BoundLora, Tokenizer};
use crate::distillery::distill_loss;
use crate::error::Result;
use crate::ndtensor::{gradcheck, GradcheckReport, Graph, Tensor, Var};
use crate::promptkit::{compose_prompt_var, compose_target_var};
use crate::seeds;

pub const REL_TOL: f64 = 1e-4;

/// Elements checked per parameter tensor at most.
const MAX_PER_PARAM: usize = 48;

type Loss = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub report: GradcheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub max_rel_error: f64,
    pub seconds: f64,
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeds::rng(seeds::mix_str(seed, "gradcheck"));
    Tensor::randn(shape, 0.0, 1.0, &mut rng).expect("valid shape")
}

/// Contracts a tensor-valued output with fixed random weights so every
/// element contributes to the scalar.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = randn(&shape, seed ^ 0x5eed);
    let c = g.constant(&shape, w.into_data())?;
    let h = g.hadamard(out, c)?;
    Ok(g.sum(h))
}

fn tiny_backbone() -> Result<BackboneCheckpoint<f64>> {
    let vocab: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
    let tok = Tokenizer::new(&vocab)?;
    let cfg = BackboneConfig {
        vocab_size: tok.vocab_size(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 16,
        tie_output: false,
    };
    let mut ck = BackboneCheckpoint::<f32>::random(cfg, tok, 21)?.cast::<f64>();
    ck.freeze();
    Ok(ck)
}

fn cases() -> Result<Vec<(&'static str, Loss, Vec<Tensor<f64>>)>> {
    let mut v: Vec<(&'static str, Loss, Vec<Tensor<f64>>)> = Vec::new();
    v.push((
        "matmul",
        Box::new(|g, p| {
            let y = g.matmul(p[0], p[1])?;
            probe(g, y, 1)
        }),
        vec![randn(&[3, 4], 1), randn(&[4, 2], 2)],
    ));
    v.push((
        "matmul_nt",
        Box::new(|g, p| {
            let y = g.matmul_nt(p[0], p[1])?;
            probe(g, y, 2)
        }),
        vec![randn(&[3, 4], 3), randn(&[5, 4], 4)],
    ));
    v.push((
        "transpose",
        Box::new(|g, p| {
            let y = g.transpose(p[0])?;
            probe(g, y, 3)
        }),
        vec![randn(&[3, 4], 5)],
    ));
    v.push((
        "add",
        Box::new(|g, p| {
            let y = g.add(p[0], p[1])?;
            probe(g, y, 4)
        }),
        vec![randn(&[2, 3], 6), randn(&[2, 3], 7)],
    ));
    v.push((
        "add_row",
        Box::new(|g, p| {
            let y = g.add_row(p[0], p[1])?;
            probe(g, y, 5)
        }),
        vec![randn(&[3, 4], 8), randn(&[4], 9)],
    ));
    v.push((
        "hadamard",
        Box::new(|g, p| {
            let y = g.hadamard(p[0], p[1])?;
            probe(g, y, 6)
        }),
        vec![randn(&[3, 4], 10), randn(&[3, 4], 11)],
    ));
    v.push((
        "scale",
        Box::new(|g, p| {
            let y = g.scale(p[0], -1.7);
            probe(g, y, 7)
        }),
        vec![randn(&[2, 5], 12)],
    ));
    v.push((
        "gelu",
        Box::new(|g, p| {
            let y = g.gelu(p[0]);
            probe(g, y, 8)
        }),
        vec![randn(&[3, 5], 13)],
    ));
    v.push((
        "layer_norm",
        Box::new(|g, p| {
            let y = g.layer_norm(p[0], p[1], p[2])?;
            probe(g, y, 9)
        }),
        vec![randn(&[3, 6], 14), randn(&[6], 15), randn(&[6], 16)],
    ));
    v.push((
        "softmax_rows",
        Box::new(|g, p| {
            let y = g.softmax_rows(p[0])?;
            probe(g, y, 10)
        }),
        vec![randn(&[3, 5], 17)],
    ));
    v.push((
        "gather_rows",
        Box::new(|g, p| {
            let y = g.gather_rows(p[0], &[2, 0, 2, 1])?;
            probe(g, y, 11)
        }),
        vec![randn(&[3, 4], 18)],
    ));
    v.push((
        "concat_rows",
        Box::new(|g, p| {
            let y = g.concat_rows(&[p[0], p[1]])?;
            probe(g, y, 12)
        }),
        vec![randn(&[2, 3], 19), randn(&[1, 3], 20)],
    ));
    v.push((
        "concat_cols",
        Box::new(|g, p| {
            let y = g.concat_cols(&[p[0], p[1]])?;
            probe(g, y, 13)
        }),
        vec![randn(&[2, 3], 21), randn(&[2, 2], 22)],
    ));
    v.push((
        "slice_cols",
        Box::new(|g, p| {
            let y = g.slice_cols(p[0], 1, 3)?;
            probe(g, y, 14)
        }),
        vec![randn(&[3, 5], 23)],
    ));
    v.push((
        "reshape",
        Box::new(|g, p| {
            let y = g.reshape(p[0], &[3, 4])?;
            probe(g, y, 15)
        }),
        vec![randn(&[2, 6], 24)],
    ));
    v.push((
        "sum",
        Box::new(|g, p| {
            let y = g.hadamard(p[0], p[0])?;
            Ok(g.sum(y))
        }),
        vec![randn(&[2, 3], 25)],
    ));
    v.push((
        "mean",
        Box::new(|g, p| {
            let y = g.hadamard(p[0], p[0])?;
            Ok(g.mean(y))
        }),
        vec![randn(&[2, 3], 26)],
    ));
    v.push((
        "add_all",
        Box::new(|g, p| {
            let a = g.sum(p[0]);
            let b = g.mean(p[1]);
            let ab = g.hadamard(a, b)?;
            g.add_all(&[a, b, ab])
        }),
        vec![randn(&[2, 2], 27), randn(&[3], 28)],
    ));
    v.push((
        "cross_entropy",
        Box::new(|g, p| g.cross_entropy(p[0], &[1, 0, 3, 2], &[true, false, true, true])),
        vec![randn(&[4, 5], 29)],
    ));
    v.push((
        "kl_divergence_rows",
        Box::new(|g, p| {
            let t = randn(&[3, 4], 30);
            let tl = g.constant(&[3, 4], t.into_data())?;
            let pp = g.softmax_rows(tl)?;
            let q = g.softmax_rows(p[0])?;
            g.kl_divergence_rows(pp, q, &[true, true, false])
        }),
        vec![randn(&[3, 4], 31)],
    ));
    v.push((
        "mse",
        Box::new(|g, p| {
            let t = randn(&[3, 4], 32);
            let a = g.constant(&[3, 4], t.into_data())?;
            g.mse(a, p[0], &[true, false, true])
        }),
        vec![randn(&[3, 4], 33)],
    ));
    v.push((
        "compose_prompt",
        Box::new(|g, p| {
            let y = compose_prompt_var(g, p[0], p[1], p[2])?;
            probe(g, y, 16)
        }),
        vec![randn(&[4, 6], 34), randn(&[4, 2], 35), randn(&[2, 6], 36)],
    ));
    v.push((
        "compose_target_prompt",
        Box::new(|g, p| {
            let y = compose_target_var(g, p[0], p[1], p[2])?;
            probe(g, y, 17)
        }),
        vec![randn(&[4, 6], 37), randn(&[4], 38), randn(&[6], 39)],
    ));

    let ck = tiny_backbone()?;
    let d = ck.d_model();
    let (input, target) = (vec![1usize, 7, 8, 6], vec![9usize, 2]);
    let teacher = randn(&[3, d], 40);
    {
        let ck = ck.clone();
        let (input, target) = (input.clone(), target.clone());
        v.push((
            "distill_loss",
            Box::new(move |g, p| {
                let b = ck.bind(g, false);
                let tp = g.constant(teacher.shape(), teacher.data().to_vec())?;
                let ts = ck.forward_with_prompt(g, &b, Some(tp), &input, &target, None)?;
                let sp = compose_prompt_var(g, p[0], p[1], p[2])?;
                let ss = ck.forward_with_prompt(g, &b, Some(sp), &input, &target, None)?;
                Ok(distill_loss(g, &ts, &ss, 0.5, 0.5)?.total)
            }),
            vec![randn(&[3, d], 41), randn(&[3, 1], 42), randn(&[1, d], 43)],
        ));
    }
    {
        let ck = ck.clone();
        let n_layers = ck.config.n_layers;
        let lora_shapes: Vec<Tensor<f64>> = (0..n_layers)
            .flat_map(|l| {
                let s = 50 + 4 * l as u64;
                [
                    randn(&[d, 2], s),
                    randn(&[2, d], s + 1),
                    randn(&[d, 2], s + 2),
                    randn(&[2, d], s + 3),
                ]
            })
            .map(|t| {
                Tensor::from_f64_slice(
                    t.shape(),
                    &t.data().iter().map(|x| 0.3 * x).collect::<Vec<_>>(),
                )
                .expect("shape")
            })
            .collect();
        let mut params = vec![randn(&[2, d], 44)];
        params.extend(lora_shapes);
        v.push((
            "backbone_prompt_lora",
            Box::new(move |g, p| {
                let b = ck.bind(g, false);
                let layers = (0..n_layers)
                    .map(|l| [p[1 + 4 * l], p[2 + 4 * l], p[3 + 4 * l], p[4 + 4 * l]])
                    .collect();
                let lora = BoundLora { layers, scale: 1.0 };
                let s = ck.forward_with_prompt(g, &b, Some(p[0]), &input, &target, Some(&lora))?;
                g.cross_entropy(s.logits, &s.next_ids, &s.loss_mask)
            }),
            params,
        ));
    }
    {
        // Every backbone weight as a parameter, as in full fine-tuning.
        let ck = ck.clone();
        let params: Vec<Tensor<f64>> = ck
            .weights
            .named()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        v.push((
            "backbone_weights",
            Box::new(move |g, p| {
                let b = ck.bind_vars(p)?;
                let (logits, _) = ck.forward(g, &b, None, &[1, 7, 8, 9], None)?;
                g.cross_entropy(logits, &[7, 8, 9, 2], &[true, true, true, true])
            }),
            params,
        ));
    }
    Ok(v)
}

/// Runs every case; fails on the first element over [`REL_TOL`].
pub fn run_gradcheck_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut out = Vec::new();
    let mut max = 0.0f64;
    for (i, (name, f, params)) in cases()?.into_iter().enumerate() {
        let report = gradcheck(f, &params, REL_TOL, MAX_PER_PARAM, i as u64)?;
        max = max.max(report.max_rel_error);
        out.push(CaseReport { name, report });
    }
    Ok(SuiteReport {
        cases: out,
        max_rel_error: max,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let r = run_gradcheck_suite().unwrap();
        assert!(r.max_rel_error < REL_TOL, "{r:?}");
        assert!(r.cases.iter().all(|c| c.report.checked > 0));
    }

    #[test]
    fn a_missing_gradient_is_caught() {
        // The first argument of mse is detached, so its analytic gradient is zero.
        let a = randn(&[2, 3], 1);
        let r = gradcheck(
            |g, p| {
                let b = g.constant(&[2, 3], vec![0.5; 6])?;
                g.mse(p[0], b, &[true, true])
            },
            &[a],
            REL_TOL,
            8,
            0,
        );
        assert!(matches!(
            r,
            Err(crate::error::Error::GradientMismatch { .. })
        ));
    }
}
