use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares analytic gradients of the scalar `f` against central differences.
///
/// Tensors with more than `max_per_param` elements are checked on a seeded
/// sample. Fails on the first element whose relative error exceeds `rel_tol`.
pub fn gradcheck<F>(
    f: F,
    params: &[Tensor<f64>],
    rel_tol: f64,
    max_per_param: usize,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let trainable: Vec<Tensor<f64>> = params
        .iter()
        .map(|p| p.clone().with_requires_grad(true))
        .collect();
    let vars: Vec<Var> = trainable.iter().map(|p| g.leaf(p)).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gradcheck: non-finite loss".into()));
    }
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let indices: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            let mut s = sample(&mut rng, n, max_per_param).into_vec();
            s.sort_unstable();
            s
        };
        let analytic = grads.get(*var);
        for idx in indices {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.map_or(0.0, |g| g[idx]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, idx));
            }
            if err > rel_tol {
                return Err(Error::GradientMismatch {
                    param: pi,
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hadamard_square_gradient_is_two_a() {
        let a = Tensor::<f64>::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.7, 0.0, -0.4]).unwrap();
        let report = gradcheck(
            |g, v| {
                let h = g.hadamard(v[0], v[0])?;
                Ok(g.sum(h))
            },
            &[a],
            1e-6,
            64,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let a = Tensor::<f64>::ones(&[4]).unwrap();
        let report = gradcheck(|g, _| g.constant(&[1], vec![3.0]), &[a], 1e-6, 64, 0).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn broken_gradient_is_reported() {
        // scale forward by 2 but claim it is an identity by detaching through a constant
        let a = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = gradcheck(
            |g, v| {
                let detached = g.constant(&[2], g.value(v[0]).to_vec())?;
                let h = g.hadamard(v[0], detached)?;
                Ok(g.sum(h))
            },
            &[a],
            1e-4,
            64,
            0,
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                Error::GradientMismatch {
                    param: 0,
                    index: 0,
                    ..
                }
            ),
            "{err}"
        );
    }
}
