//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::ndtensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Slot<E> {
    shape: Vec<usize>,
    m: Vec<E>,
    v: Vec<E>,
    steps: u64,
}

/// Optimizer state over a fixed registry of parameter shapes.
///
/// `step` must be handed the same tensors, in the same order, as `new`.
/// Tensors without a gradient are skipped for that step.
pub struct AdamW<E: Float = f32> {
    config: AdamWConfig,
    slots: Vec<Slot<E>>,
    steps: u64,
}

impl<E: Float> AdamW<E> {
    pub fn new(config: AdamWConfig, params: &[&Tensor<E>]) -> Self {
        let slots = params
            .iter()
            .map(|p| Slot {
                shape: p.shape().to_vec(),
                m: vec![E::zero(); p.numel()],
                v: vec![E::zero(); p.numel()],
                steps: 0,
            })
            .collect();
        AdamW {
            config,
            slots,
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Number of scalars registered for update.
    pub fn registered_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.m.len()).sum()
    }

    pub fn registered_shapes(&self) -> Vec<Vec<usize>> {
        self.slots.iter().map(|s| s.shape.clone()).collect()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update and clears the gradients it consumed.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>]) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::contract(format!(
                "optimizer registered {} tensors, step received {}",
                self.slots.len(),
                params.len()
            )));
        }
        let c = self.config;
        for (slot, p) in self.slots.iter_mut().zip(params.iter_mut()) {
            if slot.shape != p.shape() {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: slot.shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
            let Some(grad) = p.grad().map(<[E]>::to_vec) else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
            slot.steps += 1;
            let t = slot.steps as i32;
            let (b1, b2) = (E::from_f64(c.beta1), E::from_f64(c.beta2));
            let bc1 = E::from_f64(1.0 - c.beta1.powi(t));
            let bc2 = E::from_f64(1.0 - c.beta2.powi(t));
            let lr = E::from_f64(c.lr);
            let decay = E::from_f64(1.0 - c.lr * c.weight_decay);
            let eps = E::from_f64(c.eps);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (E::one() - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (E::one() - b2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] = data[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
        }
        self.steps += 1;
        Ok(())
    }
}
