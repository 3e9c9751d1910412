//! Distillation loss: alpha * CE(student, labels)
//!                  + beta * T^2 * KL(softmax(teacher/T) || softmax(student/T)),
//! averaged over tokens, natural log.
//!
//! The KL term is built as sum p_t * (log p_t - log p_s) with the
//! teacher side computed by the same row log-softmax routine the tape
//! uses, so identical teacher and student logits give exactly zero.

use super::KDLossConfig;
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Scalar, Tensor, Var};

/// Loss node plus the detached scalar parts for metrics.
pub struct KDLoss<T: Scalar> {
    pub loss: Var<T>,
    pub ce: f64,
    pub kl: f64,
}

pub fn kd_loss<T: Scalar>(
    student_logits: &Var<T>,
    teacher_logits: &Tensor<T>,
    labels: &[u32],
    cfg: &KDLossConfig,
) -> Result<KDLoss<T>> {
    cfg.validate()?;
    let shape = student_logits.shape();
    if shape != teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            detail: format!("student {:?} vs teacher {:?}", shape, teacher_logits.shape()),
        });
    }
    let vocab = *shape.last().unwrap();
    let tokens = student_logits.numel() / vocab;
    if labels.len() != tokens {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            detail: format!("{} labels for {} token positions", labels.len(), tokens),
        });
    }
    let tape = student_logits.tape();
    let inv_tokens = T::from_f64(1.0 / tokens as f64);

    // Cross-entropy against hard labels.
    let ce = student_logits
        .log_softmax_last()?
        .gather_last(labels)?
        .mean_all()?
        .mul_scalar(-T::one())?;

    // KL against the temperature-softened teacher distribution.
    let inv_t = T::from_f64(1.0 / cfg.temperature);
    let log_ps = student_logits.mul_scalar(inv_t)?.log_softmax_last()?;
    let scaled_teacher: Vec<T> = teacher_logits.data().iter().map(|&v| v * inv_t).collect();
    let log_pt = log_softmax_rows(&scaled_teacher, vocab);
    let pt: Vec<T> = log_pt.iter().map(|&v| v.exp()).collect();
    let log_pt_var = tape.constant(Tensor::from_vec(shape.clone(), log_pt)?);
    let pt_var = tape.constant(Tensor::from_vec(shape.clone(), pt)?);
    let kl = pt_var
        .mul(&log_pt_var.sub(&log_ps)?)?
        .sum_all()?
        .mul_scalar(inv_tokens)?;

    let alpha = T::from_f64(cfg.alpha_ce);
    let beta_t2 = T::from_f64(cfg.beta_kl * cfg.temperature * cfg.temperature);
    let loss = ce.mul_scalar(alpha)?.add(&kl.mul_scalar(beta_t2)?)?;
    Ok(KDLoss { loss, ce: ce.item().to_f64(), kl: kl.item().to_f64() })
}
