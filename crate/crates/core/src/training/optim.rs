use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RMSProp with a per-parameter squared-gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// One accumulator per parameter tensor, created on the first step.
    pub accumulators: Vec<Tensor>,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp::new(1e-3, 0.9, 1e-8)
    }
}

impl RmsProp {
    pub fn new(learning_rate: f64, rho: f64, epsilon: f64) -> Self {
        RmsProp {
            learning_rate,
            rho,
            epsilon,
            accumulators: Vec::new(),
        }
    }

    /// `v ← ρv + (1−ρ)g²; θ ← θ − lr·g/(√v + ε)`, tensor by tensor.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { op: "rmsprop" });
        }
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.accumulators.is_empty() {
            self.accumulators = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.accumulators) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "rmsprop",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.rho * *vi + (1.0 - self.rho) * gi * gi;
                *theta -= self.learning_rate * gi / (vi.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales all gradients together so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient { op: "clip" });
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}
