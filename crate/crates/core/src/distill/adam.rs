//! Adam with bias correction, global-norm gradient clipping, and linear
//! warmup to a constant learning rate.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, SharedTensor};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            grad_clip: 1.0,
        }
    }
}

pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    params: Vec<SharedTensor<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: usize,
}

/// Per-step optimizer info for the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct AdamStepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<SharedTensor<T>>, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.borrow().numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.borrow().numel()]).collect();
        Adam { cfg, params, m, v, t: 0 }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Apply one update from the accumulated gradients. The caller is
    /// responsible for zeroing gradients between steps.
    pub fn step(&mut self) -> Result<AdamStepInfo> {
        // Global norm in a fixed order.
        let mut norm_sq = 0.0f64;
        for p in &self.params {
            let p = p.borrow();
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::Invalid("optimizer step with missing gradient".into()))?;
            for &gi in g {
                let gi = gi.to_f64();
                norm_sq += gi * gi;
            }
        }
        let grad_norm = norm_sq.sqrt();
        let clip_factor = (self.cfg.grad_clip / (grad_norm + 1e-6)).min(1.0);
        let clip = T::from_f64(clip_factor);

        self.t += 1;
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (self.t as f64 / self.cfg.warmup_steps as f64).min(1.0)
        };
        let lr = self.cfg.learning_rate * warm;

        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);

        for (pi, p) in self.params.iter().enumerate() {
            let mut p = p.borrow_mut();
            let grad = p.grad.take().ok_or_else(|| {
                Error::Invalid("optimizer step with missing gradient".into())
            })?;
            {
                let m = &mut self.m[pi];
                let v = &mut self.v[pi];
                let data = p.data_mut();
                for i in 0..data.len() {
                    let g = grad[i] * clip;
                    m[i] = b1 * m[i] + (one - b1) * g;
                    v[i] = b2 * v[i] + (one - b2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] = data[i] - lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
            p.grad = Some(grad);
        }
        Ok(AdamStepInfo { grad_norm, lr })
    }
}
