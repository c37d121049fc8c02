//! Adam at a constant learning rate.

use crate::error::{Error, Result};
use crate::model::{ModelParams, Weights};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Weights<Vec<f64>>,
    v: Weights<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        let zeros = params.weights.map(|t| vec![0.0; t.numel()]);
        Ok(Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of `params` with `grads` (canonical order).
    pub fn step(&mut self, params: &mut ModelParams, grads: &Weights<Tensor>) -> Result<()> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let slots = params.weights.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, g), (m, v)) in slots {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        if !params.is_finite() {
            return Err(Error::Numeric("parameters became non-finite after an optimizer step".into()));
        }
        Ok(())
    }
}
