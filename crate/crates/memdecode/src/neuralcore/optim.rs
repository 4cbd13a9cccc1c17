//! rmsprop parameter updates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// rmsprop state: a moving average of squared gradients per parameter.
///
/// Update rule: `v <- decay*v + (1-decay)*g^2`,
/// `p <- p - lr*g/(sqrt(v) + epsilon)`, computed in f64.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    v: Vec<f64>,
}

impl RmsProp {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            decay,
            epsilon,
            v: vec![0.0; n_params],
        }
    }

    pub fn squared_grad_avg(&self) -> &[f64] {
        &self.v
    }

    /// Applies one update step. A non-finite gradient aborts the step
    /// before any parameter is touched, reporting the offending index.
    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.v.len() || grads.len() != self.v.len() {
            return Err(Error::Shape(format!(
                "rmsprop state holds {} parameters, got {} params / {} grads",
                self.v.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at parameter index {idx}"
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
            let g = g.as_f64();
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *p = T::of_f64(p.as_f64() - self.learning_rate * g / (v.sqrt() + self.epsilon));
        }
        Ok(())
    }
}
