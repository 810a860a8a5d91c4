//! Decoupled-weight-decay Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::model::Trainable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Trainable,
    pub v: Trainable,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &Trainable, config: AdamWConfig) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn update(&mut self, params: &mut Trainable, grads: &Trainable, lr: f64) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let tensors = params.named_mut().into_iter().zip(grads.named()).zip(self.m.named_mut()).zip(self.v.named_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (step + c.weight_decay * *p);
            });
        }
    }
}

/// Rescale `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norms before and after.
pub fn clip_global_norm(grads: &mut Trainable, max_norm: f64) -> (f64, f64) {
    let norm = grads.sum_squares().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
        (norm, grads.sum_squares().sqrt())
    } else {
        (norm, norm)
    }
}
