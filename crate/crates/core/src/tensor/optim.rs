use std::collections::HashMap;

use super::{Tensor, TensorId};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<TensorId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. Each must carry a gradient;
    /// gradients are left in place for the caller to reset.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
            return Err(Error::contract(format!(
                "parameter of shape {:?} has no gradient",
                p.shape()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            let grad = p.grad.take().expect("checked above");
            let decay = 1.0 - self.lr * self.weight_decay;
            for (i, w) in p.data.iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
