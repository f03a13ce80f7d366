use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{backward_into, forward, GradSet, LossGradBundle, ParamSet};
use crate::numerics::Matrix;

use super::hidden::{hidden_loss_grads, hidden_mse_terms, LayerMap, Projection};
use super::losses::{adaptive_weight, cross_entropy, cross_entropy_grad, kl_divergence, kl_divergence_grad, one_hot};
use super::{compose_losses, LossBreakdown, LossParts};

/// Switches for the ablation variants. All on is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistillOptions {
    /// Mutual output distillation (KL terms).
    pub mutual: bool,
    /// Hidden-state and attention alignment.
    pub hidden: bool,
    /// Divide distillation terms by the summed task losses.
    pub adaptive: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            mutual: true,
            hidden: true,
            adaptive: true,
        }
    }
}

impl DistillOptions {
    pub fn task_only() -> Self {
        Self {
            mutual: false,
            hidden: false,
            adaptive: true,
        }
    }
}

/// Gradients of one local step: teacher (`∂L_t/∂Θ_t`), projection
/// (`∂L_t/∂W_h`) and student (`∂L_s/∂Θ_s`).
#[derive(Clone, Debug)]
pub struct LocalGradients {
    pub teacher: GradSet,
    pub projection: Matrix,
    pub student: GradSet,
    pub losses: LossBreakdown,
}

fn scaled(v: Vec<f64>, s: f64) -> Vec<f64> {
    v.into_iter().map(|x| x * s).collect()
}

fn add_into(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    if b.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite loss {b:?}")))
    }
}

/// Computes both local gradient sets for a batch, mean-reduced.
pub fn local_gradients(
    teacher: &ParamSet,
    student: &ParamSet,
    projection: &Projection,
    map: &LayerMap,
    batch: &[Sample],
    options: DistillOptions,
) -> Result<LocalGradients> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let num_classes = teacher.config().num_classes;
    if student.config().num_classes != num_classes {
        return Err(Error::Shape("teacher and student disagree on class count".into()));
    }
    let (lt, ls) = (teacher.config().num_layers, student.config().num_layers);
    let inv_b = 1.0 / batch.len() as f64;

    let mut g_teacher = GradSet::zeros_like(teacher);
    let mut g_student = GradSet::zeros_like(student);
    let mut g_proj = Matrix::zeros(projection.w_h.rows(), projection.w_h.cols());
    let mut parts = Vec::with_capacity(batch.len());

    for sample in batch {
        if sample.label >= num_classes {
            return Err(Error::InvalidArgument(format!("label {} out of range", sample.label)));
        }
        let tt = forward(teacher, &sample.features)?;
        let ts = forward(student, &sample.features)?;
        let y = one_hot(sample.label, num_classes);

        let task_t = cross_entropy(&y, &tt.probs)?;
        let task_s = cross_entropy(&y, &ts.probs)?;
        let w = if options.adaptive {
            adaptive_weight(task_t, task_s)
        } else {
            1.0
        };

        let mut bt = LossGradBundle::with_probs(lt, scaled(cross_entropy_grad(&y, &tt.probs)?, inv_b));
        let mut bs = LossGradBundle::with_probs(ls, scaled(cross_entropy_grad(&y, &ts.probs)?, inv_b));

        let (mut distill_t, mut distill_s, mut hidden) = (0.0, 0.0, 0.0);
        if options.mutual {
            distill_t = w * kl_divergence(&ts.probs, &tt.probs)?;
            distill_s = w * kl_divergence(&tt.probs, &ts.probs)?;
            add_into(bt.probs.as_mut().unwrap(), &kl_divergence_grad(&ts.probs, &tt.probs)?, w * inv_b);
            add_into(bs.probs.as_mut().unwrap(), &kl_divergence_grad(&tt.probs, &ts.probs)?, w * inv_b);
        }
        if options.hidden {
            let (mh, ma) = hidden_mse_terms(&tt, &ts, projection, map)?;
            hidden = w * (mh + ma);
            let hg = hidden_loss_grads(&tt, &ts, projection, map, w * inv_b)?;
            bt.hidden = hg.teacher_hidden;
            bt.attention = hg.teacher_attention;
            bs.hidden = hg.student_hidden;
            bs.attention = hg.student_attention;
            g_proj.add_assign(&hg.w_h)?;
        }

        let b = compose_losses(LossParts {
            task_teacher: task_t,
            task_student: task_s,
            distill_teacher: distill_t,
            distill_student: distill_s,
            hidden,
        });
        check_finite(&b)?;
        parts.push(b);

        backward_into(teacher, &sample.features, &tt, &bt, &mut g_teacher)?;
        backward_into(student, &sample.features, &ts, &bs, &mut g_student)?;
    }

    Ok(LocalGradients {
        teacher: g_teacher,
        projection: g_proj,
        student: g_student,
        losses: LossBreakdown::mean(&parts),
    })
}

/// Plain cross-entropy gradient of a single model, mean-reduced; returns the
/// mean loss alongside.
pub fn task_gradients(params: &ParamSet, batch: &[Sample]) -> Result<(GradSet, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let cfg = params.config();
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = GradSet::zeros_like(params);
    let mut loss = 0.0;
    for sample in batch {
        if sample.label >= cfg.num_classes {
            return Err(Error::InvalidArgument(format!("label {} out of range", sample.label)));
        }
        let t = forward(params, &sample.features)?;
        let y = one_hot(sample.label, cfg.num_classes);
        loss += cross_entropy(&y, &t.probs)?;
        let bundle = LossGradBundle::with_probs(cfg.num_layers, scaled(cross_entropy_grad(&y, &t.probs)?, inv_b));
        backward_into(params, &sample.features, &t, &bundle, &mut grads)?;
    }
    loss *= inv_b;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite task loss {loss}")));
    }
    Ok((grads, loss))
}
