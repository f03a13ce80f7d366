use crate::error::{shape_err, Error, Result};
use crate::nn::ForwardTrace;
use crate::numerics::Matrix;

/// Per-client learnable map from student hidden space to teacher hidden
/// space, stored `teacher_dim x student_dim` and applied as `H_s W_hᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub w_h: Matrix,
}

impl Projection {
    /// Rectangular identity: the student state is copied into the leading
    /// teacher coordinates.
    pub fn identity(teacher_dim: usize, student_dim: usize) -> Self {
        let mut w_h = Matrix::zeros(teacher_dim, student_dim);
        for i in 0..teacher_dim.min(student_dim) {
            w_h.set(i, i, 1.0);
        }
        Self { w_h }
    }

    pub fn apply(&self, student_hidden: &Matrix) -> Matrix {
        student_hidden.mul_nt(&self.w_h)
    }
}

/// Which teacher layer each student layer is aligned to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMap {
    pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    /// Strided alignment: student layer `j` pairs with teacher layer
    /// `ceil((j + 1) * L_t / L_s) - 1`.
    pub fn uniform(student_layers: usize, teacher_layers: usize) -> Result<Self> {
        if student_layers == 0 || student_layers > teacher_layers {
            return Err(Error::InvalidArgument(format!(
                "cannot map {student_layers} student layers onto {teacher_layers} teacher layers"
            )));
        }
        let pairs = (0..student_layers)
            .map(|j| (j, ((j + 1) * teacher_layers).div_ceil(student_layers) - 1))
            .collect();
        Self::new(pairs, student_layers, teacher_layers)
    }

    pub fn new(pairs: Vec<(usize, usize)>, student_layers: usize, teacher_layers: usize) -> Result<Self> {
        if pairs.len() != student_layers {
            return Err(Error::InvalidArgument(format!(
                "{} pairs for {student_layers} student layers",
                pairs.len()
            )));
        }
        for (k, &(s, t)) in pairs.iter().enumerate() {
            if s != k || t >= teacher_layers {
                return Err(Error::InvalidArgument(format!("invalid layer pair ({s}, {t})")));
            }
            if k > 0 && t <= pairs[k - 1].1 {
                return Err(Error::InvalidArgument(
                    "teacher indices must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

fn mse(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n
}

fn check_traces(t: &ForwardTrace, s: &ForwardTrace, proj: &Projection, map: &LayerMap) -> Result<()> {
    for &(j, k) in map.pairs() {
        let (hs, ht) = (
            s.hidden_states.get(j).ok_or_else(|| Error::Shape(format!("student has no layer {j}")))?,
            t.hidden_states.get(k).ok_or_else(|| Error::Shape(format!("teacher has no layer {k}")))?,
        );
        if proj.w_h.shape() != (ht.cols(), hs.cols()) || hs.rows() != ht.rows() {
            return Err(shape_err("projected hidden state", hs.shape(), ht.shape()));
        }
        if s.attentions[j].shape() != t.attentions[k].shape() {
            return Err(shape_err(
                "attention heatmap",
                s.attentions[j].shape(),
                t.attentions[k].shape(),
            ));
        }
    }
    Ok(())
}

/// Unweighted `(MSE_hidden, MSE_attention)`, each averaged over mapped layer
/// pairs and matrix entries.
pub fn hidden_mse_terms(
    trace_t: &ForwardTrace,
    trace_s: &ForwardTrace,
    proj: &Projection,
    map: &LayerMap,
) -> Result<(f64, f64)> {
    check_traces(trace_t, trace_s, proj, map)?;
    let m = map.pairs().len() as f64;
    let (mut h, mut a) = (0.0, 0.0);
    for &(j, k) in map.pairs() {
        h += mse(&trace_t.hidden_states[k], &proj.apply(&trace_s.hidden_states[j]));
        a += mse(&trace_t.attentions[k], &trace_s.attentions[j]);
    }
    Ok((h / m, a / m))
}

/// `(MSE(H_t, H_s W_hᵀ) + MSE(A_t, A_s)) / task_sum`, with `task_sum`
/// floored like the distillation denominator.
pub fn adaptive_hidden_loss(
    trace_t: &ForwardTrace,
    trace_s: &ForwardTrace,
    proj: &Projection,
    map: &LayerMap,
    task_sum: f64,
) -> Result<f64> {
    let (h, a) = hidden_mse_terms(trace_t, trace_s, proj, map)?;
    Ok((h + a) / task_sum.max(super::DENOM_FLOOR))
}

/// Gradients of `weight * (MSE_hidden + MSE_attention)` w.r.t. both traces
/// and the projection.
#[derive(Clone, Debug)]
pub struct HiddenLossGrads {
    pub teacher_hidden: Vec<Option<Matrix>>,
    pub teacher_attention: Vec<Option<Matrix>>,
    pub student_hidden: Vec<Option<Matrix>>,
    pub student_attention: Vec<Option<Matrix>>,
    pub w_h: Matrix,
}

pub fn hidden_loss_grads(
    trace_t: &ForwardTrace,
    trace_s: &ForwardTrace,
    proj: &Projection,
    map: &LayerMap,
    weight: f64,
) -> Result<HiddenLossGrads> {
    check_traces(trace_t, trace_s, proj, map)?;
    let m = map.pairs().len() as f64;
    let mut out = HiddenLossGrads {
        teacher_hidden: vec![None; trace_t.hidden_states.len()],
        teacher_attention: vec![None; trace_t.attentions.len()],
        student_hidden: vec![None; trace_s.hidden_states.len()],
        student_attention: vec![None; trace_s.attentions.len()],
        w_h: Matrix::zeros(proj.w_h.rows(), proj.w_h.cols()),
    };
    for &(j, k) in map.pairs() {
        let hs = &trace_s.hidden_states[j];
        let ht = &trace_t.hidden_states[k];
        let mut diff = ht.sub(&proj.apply(hs))?;
        diff.scale_in_place(2.0 * weight / (m * ht.len() as f64));
        // d/dP = -diff, P = H_s W_hᵀ
        let d_proj = diff.scale(-1.0);
        out.student_hidden[j] = Some(d_proj.mul(&proj.w_h));
        out.w_h.add_assign(&d_proj.mul_tn(hs))?;
        out.teacher_hidden[k] = Some(diff);

        let at = &trace_t.attentions[k];
        let mut adiff = at.sub(&trace_s.attentions[j])?;
        adiff.scale_in_place(2.0 * weight / (m * at.len() as f64));
        out.student_attention[j] = Some(adiff.scale(-1.0));
        out.teacher_attention[k] = Some(adiff);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, init_model, ModelConfig};
    use crate::numerics::Rng;

    #[test]
    fn uniform_map() {
        assert_eq!(LayerMap::uniform(2, 4).unwrap().pairs(), &[(0, 1), (1, 3)]);
        assert_eq!(LayerMap::uniform(3, 3).unwrap().pairs(), &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(LayerMap::uniform(1, 4).unwrap().pairs(), &[(0, 3)]);
        assert_eq!(LayerMap::uniform(3, 4).unwrap().pairs(), &[(0, 1), (1, 2), (2, 3)]);
        assert!(LayerMap::uniform(3, 2).is_err());
        assert!(LayerMap::new(vec![(0, 2), (1, 1)], 2, 4).is_err());
    }

    fn traces(seed: u64) -> (ForwardTrace, ForwardTrace) {
        let cfg = ModelConfig {
            num_layers: 4,
            hidden_dim: 8,
            num_heads: 2,
            input_dim: 3,
            num_classes: 2,
            seq_len: 4,
        };
        let mut rng = Rng::new(seed);
        let t = init_model(&cfg, &mut rng).unwrap();
        let s = init_model(&cfg.with_layers(2), &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        (forward(&t, &x).unwrap(), forward(&s, &x).unwrap())
    }

    #[test]
    fn identical_traces_give_zero() {
        let (t, _) = traces(1);
        let map = LayerMap::uniform(4, 4).unwrap();
        let loss = adaptive_hidden_loss(&t, &t, &Projection::identity(8, 8), &map, 1.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn one_by_one_arithmetic() {
        // H_t = [[2]], projected student = [[0]], equal attentions, task sum 2
        let (mut t, mut s) = traces(2);
        t.hidden_states = vec![Matrix::from_rows(&[[2.0]])];
        s.hidden_states = vec![Matrix::from_rows(&[[5.0]])];
        t.attentions = vec![Matrix::from_rows(&[[1.0]])];
        s.attentions = vec![Matrix::from_rows(&[[1.0]])];
        let proj = Projection {
            w_h: Matrix::from_rows(&[[0.0]]),
        };
        let map = LayerMap::uniform(1, 1).unwrap();
        let loss = adaptive_hidden_loss(&t, &s, &proj, &map, 2.0).unwrap();
        assert_eq!(loss, 2.0);
    }

    #[test]
    fn matches_entrywise_average() {
        let (t, s) = traces(3);
        let mut rng = Rng::new(33);
        let proj = Projection {
            w_h: Matrix::from_vec(8, 8, (0..64).map(|_| rng.normal()).collect()).unwrap(),
        };
        let map = LayerMap::uniform(2, 4).unwrap();
        let got = adaptive_hidden_loss(&t, &s, &proj, &map, 0.7).unwrap();

        let mut oracle_h = 0.0;
        let mut oracle_a = 0.0;
        for &(j, k) in &[(0usize, 1usize), (1, 3)] {
            let hs = &s.hidden_states[j];
            let ht = &t.hidden_states[k];
            let mut acc = 0.0;
            for r in 0..ht.rows() {
                for c in 0..ht.cols() {
                    let mut p = 0.0;
                    for q in 0..hs.cols() {
                        p += proj.w_h.get(c, q) * hs.get(r, q);
                    }
                    acc += (ht.get(r, c) - p).powi(2);
                }
            }
            oracle_h += acc / ht.len() as f64;
            let at = &t.attentions[k];
            let as_ = &s.attentions[j];
            let mut acc = 0.0;
            for idx in 0..at.len() {
                acc += (at.data()[idx] - as_.data()[idx]).powi(2);
            }
            oracle_a += acc / at.len() as f64;
        }
        let oracle = (oracle_h / 2.0 + oracle_a / 2.0) / 0.7;
        assert!((got - oracle).abs() < 1e-10);
    }

    #[test]
    fn larger_task_sum_shrinks_loss() {
        let (t, s) = traces(4);
        let map = LayerMap::uniform(2, 4).unwrap();
        let p = Projection::identity(8, 8);
        let a = adaptive_hidden_loss(&t, &s, &p, &map, 1.0).unwrap();
        let b = adaptive_hidden_loss(&t, &s, &p, &map, 1.5).unwrap();
        assert!(a > 0.0 && b < a);
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let (t, s) = traces(5);
        let map = LayerMap::uniform(2, 4).unwrap();
        let mut rng = Rng::new(8);
        let proj = Projection {
            w_h: Matrix::from_vec(8, 8, (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap(),
        };
        let g = hidden_loss_grads(&t, &s, &proj, &map, 0.5).unwrap();
        let eps = 1e-6;
        for idx in 0..64 {
            let mut plus = proj.clone();
            plus.w_h.data_mut()[idx] += eps;
            let mut minus = proj.clone();
            minus.w_h.data_mut()[idx] -= eps;
            let fd = (adaptive_hidden_loss(&t, &s, &plus, &map, 2.0).unwrap()
                - adaptive_hidden_loss(&t, &s, &minus, &map, 2.0).unwrap())
                / (2.0 * eps);
            assert!((fd - g.w_h.data()[idx]).abs() < 1e-7, "{idx}");
        }
    }

    #[test]
    fn mismatched_heads_rejected() {
        let (t, _) = traces(6);
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 4,
            input_dim: 3,
            num_classes: 2,
            seq_len: 4,
        };
        let s = init_model(&cfg, &mut Rng::new(0)).unwrap();
        let st = forward(&s, &Matrix::zeros(4, 3)).unwrap();
        let map = LayerMap::uniform(2, 4).unwrap();
        assert!(adaptive_hidden_loss(&t, &st, &Projection::identity(8, 8), &map, 1.0).is_err());
    }
}
