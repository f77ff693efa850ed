//! Gradient-step optimizers and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::policy::Policy;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn warmup_cosine(base_lr: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Stateful first-order optimizer. `step` applies a *descent* step along `grad`.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    m: Vec<T>,
    v: Vec<T>,
    t: u32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![T::zero(); num_params], vec![T::zero(); num_params]),
        };
        Self { kind, m, v, t: 0 }
    }

    /// Moves `policy` by `-lr * direction(grad)`; returns the update norm.
    pub fn step(&mut self, policy: &mut Policy<T>, grad: &[T], lr: f64) -> Result<T> {
        if grad.len() != policy.num_params() {
            return Err(invalid("gradient length does not match parameter count"));
        }
        let delta: Vec<T> = match self.kind {
            OptimizerKind::Sgd => grad.to_vec(),
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
                self.t += 1;
                let c1 = T::one() - b1.powi(self.t as i32);
                let c2 = T::one() - b2.powi(self.t as i32);
                grad.iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                        self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                        (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps)
                    })
                    .collect()
            }
        };
        let scale = T::lit(-lr);
        let norm = delta.iter().map(|&d| d * d).sum::<T>().sqrt() * scale.abs();
        policy.apply_update(&delta, scale)?;
        Ok(norm)
    }
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}
