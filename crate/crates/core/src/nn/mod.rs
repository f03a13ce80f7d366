//! Small self-attention encoders with hand-written backpropagation.
//!
//! Every layer exposes its output hidden state and its per-head attention
//! heatmaps in the [`ForwardTrace`], which the distillation losses consume.

mod checkpoint;
mod model;
mod optim;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Matrix, Rng};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{backward, backward_into, forward, predict, ForwardTrace, LossGradBundle};
pub use optim::{Adam, AdamConfig, Optimizer, OptimizerKind};

/// Width of the feed-forward block relative to `hidden_dim`.
pub const FFN_MULT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("input_dim", self.input_dim),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::ModelConfig(format!("{name} must be >= 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::ModelConfig("num_classes must be >= 2".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::ModelConfig(format!(
                "num_heads {} does not divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        FFN_MULT * self.hidden_dim
    }

    /// Same architecture truncated to the first `num_layers` layers.
    pub fn with_layers(&self, num_layers: usize) -> Self {
        Self { num_layers, ..*self }
    }

    /// Parameter names and shapes, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, (usize, usize))> {
        let d = self.hidden_dim;
        let f = self.ffn_dim();
        let mut out = vec![
            ("embed.w".to_string(), (self.input_dim, d)),
            ("embed.b".to_string(), (1, d)),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            out.extend([
                (p("attn.wq"), (d, d)),
                (p("attn.bq"), (1, d)),
                (p("attn.wk"), (d, d)),
                (p("attn.bk"), (1, d)),
                (p("attn.wv"), (d, d)),
                (p("attn.bv"), (1, d)),
                (p("attn.wo"), (d, d)),
                (p("attn.bo"), (1, d)),
                (p("ln1.gamma"), (1, d)),
                (p("ln1.beta"), (1, d)),
                (p("ffn.w1"), (d, f)),
                (p("ffn.b1"), (1, f)),
                (p("ffn.w2"), (f, d)),
                (p("ffn.b2"), (1, d)),
                (p("ln2.gamma"), (1, d)),
                (p("ln2.beta"), (1, d)),
            ]);
        }
        out.push(("head.w".to_string(), (d, self.num_classes)));
        out.push(("head.b".to_string(), (1, self.num_classes)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, (r, c))| r * c).sum()
    }
}

/// Named parameters of one model, in the order of [`ModelConfig::param_layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    config: ModelConfig,
    tensors: IndexMap<String, Matrix>,
}

impl ParamSet {
    /// Builds a parameter set from explicit tensors, checking names and
    /// shapes against the config layout.
    pub fn from_tensors(config: ModelConfig, tensors: IndexMap<String, Matrix>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut ordered = IndexMap::with_capacity(layout.len());
        for (name, shape) in layout {
            let m = tensors
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if m.shape() != shape {
                return Err(shape_err(&name, m.shape(), shape));
            }
            ordered.insert(name, m.clone());
        }
        Ok(Self {
            config,
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    /// In-place `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &GradSet, lr: f64) -> Result<()> {
        grads.check_layout(self)?;
        for ((_, p), (_, g)) in self.tensors.iter_mut().zip(grads.iter()) {
            p.axpy(-lr, g)?;
        }
        Ok(())
    }
}

/// Initializes a model: weights uniform in `±1/sqrt(fan_in)`, biases and
/// layer-norm shifts zero, layer-norm gains one.
pub fn init_model(config: &ModelConfig, rng: &mut Rng) -> Result<ParamSet> {
    config.validate()?;
    let mut tensors = IndexMap::new();
    for (name, (rows, cols)) in config.param_layout() {
        let m = if name.ends_with(".gamma") {
            Matrix::filled(rows, cols, 1.0)
        } else if rows == 1 {
            Matrix::zeros(rows, cols)
        } else {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
            Matrix::from_vec(rows, cols, data)?
        };
        tensors.insert(name, m);
    }
    Ok(ParamSet {
        config: *config,
        tensors,
    })
}

/// Returns `params - lr * grads` as a new parameter set.
pub fn apply_sgd(params: &ParamSet, grads: &GradSet, lr: f64) -> Result<ParamSet> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    let mut out = params.clone();
    out.sgd_step(grads, lr)?;
    Ok(out)
}

/// Gradients with the same names and shapes as a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    tensors: IndexMap<String, Matrix>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn from_tensors(tensors: IndexMap<String, Matrix>) -> Self {
        Self { tensors }
    }

    pub fn into_tensors(self) -> IndexMap<String, Matrix> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn entry(&mut self, name: &str) -> &mut Matrix {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient named {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradSet) -> Result<()> {
        self.check_same(other)?;
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(other.iter()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for m in self.tensors.values_mut() {
            m.scale_in_place(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }

    pub fn max_abs_diff(&self, other: &GradSet) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Names and shapes agree, in order.
    pub fn same_layout(&self, other: &GradSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn check_same(&self, other: &GradSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("gradient sets have different layouts".into()))
        }
    }

    pub fn check_layout(&self, params: &ParamSet) -> Result<()> {
        if self.tensors.len() != params.tensors.len() {
            return Err(Error::Shape(format!(
                "gradient has {} tensors, params have {}",
                self.tensors.len(),
                params.tensors.len()
            )));
        }
        for ((ng, g), (np, p)) in self.iter().zip(params.iter()) {
            if ng != np {
                return Err(Error::Shape(format!("gradient {ng} vs parameter {np}")));
            }
            if g.shape() != p.shape() {
                return Err(shape_err(ng, g.shape(), p.shape()));
            }
        }
        Ok(())
    }
}
