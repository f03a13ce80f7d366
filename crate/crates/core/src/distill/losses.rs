use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor applied to the adaptive denominator `task_teacher + task_student`.
pub const DENOM_FLOOR: f64 = 1e-8;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distribution lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    v
}

/// `-Σ target_i ln(pred_i)`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(target, pred)?;
    Ok(-target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// Gradient of [`cross_entropy`] w.r.t. `pred`.
pub fn cross_entropy_grad(target: &[f64], pred: &[f64]) -> Result<Vec<f64>> {
    check_len(target, pred)?;
    Ok(target
        .iter()
        .zip(pred)
        .map(|(&t, &p)| if p > PROB_FLOOR { -t / p } else { 0.0 })
        .collect())
}

/// `KL(reference || learner) = Σ ref_i ln(ref_i / learner_i)`.
pub fn kl_divergence(reference: &[f64], learner: &[f64]) -> Result<f64> {
    check_len(reference, learner)?;
    Ok(reference
        .iter()
        .zip(learner)
        .filter(|(r, _)| **r != 0.0)
        .map(|(&r, &l)| r * (r.max(PROB_FLOOR).ln() - l.max(PROB_FLOOR).ln()))
        .sum())
}

/// Gradient of [`kl_divergence`] w.r.t. `learner` only; the reference is
/// treated as a constant.
pub fn kl_divergence_grad(reference: &[f64], learner: &[f64]) -> Result<Vec<f64>> {
    check_len(reference, learner)?;
    Ok(reference
        .iter()
        .zip(learner)
        .map(|(&r, &l)| if l > PROB_FLOOR { -r / l } else { 0.0 })
        .collect())
}

/// `1 / max(task_teacher + task_student, DENOM_FLOOR)`.
pub fn adaptive_weight(task_teacher: f64, task_student: f64) -> f64 {
    1.0 / (task_teacher + task_student).max(DENOM_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveDistill {
    pub teacher: f64,
    pub student: f64,
    pub weight: f64,
}

/// Adaptive mutual distillation losses for one sample with gold label `y`.
pub fn adaptive_distill_losses(y_t: &[f64], y_s: &[f64], y: &[f64]) -> Result<AdaptiveDistill> {
    let weight = adaptive_weight(cross_entropy(y, y_t)?, cross_entropy(y, y_s)?);
    Ok(AdaptiveDistill {
        teacher: weight * kl_divergence(y_s, y_t)?,
        student: weight * kl_divergence(y_t, y_s)?,
        weight,
    })
}
