//! Loss family for adaptive mutual distillation between a local teacher and
//! the shared student.
//!
//! Per sample, with `w = 1 / (task_teacher + task_student)` held constant
//! during differentiation:
//!
//! ```text
//! distill_teacher = w * KL(student || teacher)   (student prediction frozen)
//! distill_student = w * KL(teacher || student)   (teacher prediction frozen)
//! hidden          = w * (MSE(H_t, H_s W_hᵀ) + MSE(A_t, A_s))
//! total_teacher   = task_teacher + distill_teacher + hidden
//! total_student   = task_student + distill_student + hidden
//! ```
//!
//! Batch losses and gradients are means over samples.

mod hidden;
mod local;
mod losses;

use serde::{Deserialize, Serialize};

pub use hidden::{
    adaptive_hidden_loss, hidden_loss_grads, hidden_mse_terms, HiddenLossGrads, LayerMap,
    Projection,
};
pub use local::{local_gradients, task_gradients, DistillOptions, LocalGradients};
pub use losses::{
    adaptive_distill_losses, adaptive_weight, cross_entropy, cross_entropy_grad, kl_divergence,
    kl_divergence_grad, one_hot, AdaptiveDistill, DENOM_FLOOR, PROB_FLOOR,
};

/// Every loss component of one sample or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_teacher: f64,
    pub task_student: f64,
    pub distill_teacher: f64,
    pub distill_student: f64,
    pub hidden: f64,
    pub total_teacher: f64,
    pub total_student: f64,
}

/// Components entering the unified teacher and student losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub task_teacher: f64,
    pub task_student: f64,
    pub distill_teacher: f64,
    pub distill_student: f64,
    pub hidden: f64,
}

pub fn compose_losses(parts: LossParts) -> LossBreakdown {
    LossBreakdown {
        task_teacher: parts.task_teacher,
        task_student: parts.task_student,
        distill_teacher: parts.distill_teacher,
        distill_student: parts.distill_student,
        hidden: parts.hidden,
        total_teacher: parts.task_teacher + parts.distill_teacher + parts.hidden,
        total_student: parts.task_student + parts.distill_student + parts.hidden,
    }
}

impl LossBreakdown {
    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.task_teacher += b.task_teacher;
            out.task_student += b.task_student;
            out.distill_teacher += b.distill_teacher;
            out.distill_student += b.distill_student;
            out.hidden += b.hidden;
            out.total_teacher += b.total_teacher;
            out.total_student += b.total_student;
        }
        out.task_teacher /= n;
        out.task_student /= n;
        out.distill_teacher /= n;
        out.distill_student /= n;
        out.hidden /= n;
        out.total_teacher /= n;
        out.total_student /= n;
        out
    }

    pub fn is_finite(&self) -> bool {
        [
            self.task_teacher,
            self.task_student,
            self.distill_teacher,
            self.distill_student,
            self.hidden,
            self.total_teacher,
            self.total_student,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
