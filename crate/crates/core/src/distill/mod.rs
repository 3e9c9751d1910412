//! KD-QAT training: weighted cross-entropy + KL distillation loss,
//! freeze plans (including ov-freeze), Adam with warmup and gradient
//! clipping, and the deterministic training loops.

mod adam;
mod freeze;
mod loss;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use freeze::{apply_freeze, trainable_params, FreezePlan, FreezeRole};
pub use loss::{kd_loss, KDLoss};
pub use trainer::{
    pretrain_teacher, run_kd_qat, sample_batch, train_step, KdQatOutcome, PretrainOutcome,
    RunSinks, StepMetrics, TeacherLogits,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KDLossConfig {
    pub alpha_ce: f64,
    pub beta_kl: f64,
    pub temperature: f64,
}

impl Default for KDLossConfig {
    fn default() -> Self {
        KDLossConfig { alpha_ce: 1.0, beta_kl: 1.0, temperature: 1.0 }
    }
}

impl KDLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_ce < 0.0 || self.beta_kl < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.alpha_ce + self.beta_kl <= 0.0 {
            return Err(Error::Config("alpha_ce + beta_kl must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Probe sampling interval in steps.
    pub trace_every: usize,
    /// Held-out evaluation interval in steps (0 = final eval only).
    pub eval_every: usize,
    /// Cache teacher logits by batch content (speed/memory trade-off).
    pub cache_teacher_logits: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            seq_len: 256,
            learning_rate: 3e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            trace_every: 10,
            eval_every: 500,
            cache_teacher_logits: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("steps, batch_size and seq_len must be positive".into()));
        }
        if self.learning_rate < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("learning_rate must be >= 0, grad_clip > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::Config("trace_every must be positive".into()));
        }
        Ok(())
    }
}
