use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Update rule for a fixed, ordered list of tensors.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamConfig::default())),
        }
    }

    /// Applies one update. `params` and `grads` must pair up positionally
    /// and keep the same order on every call.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Matrix>,
        grads: impl IntoIterator<Item = &'a Matrix>,
        lr: f64,
    ) -> Result<()> {
        let params: Vec<&mut Matrix> = params.into_iter().collect();
        let grads: Vec<&Matrix> = grads.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("optimizer", p.shape(), g.shape()));
            }
        }
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.axpy(-lr, g)?;
                }
            }
            Optimizer::Adam(adam) => {
                if adam.m.is_empty() {
                    adam.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
                    adam.v = adam.m.clone();
                }
                if adam.m.len() != grads.len() {
                    return Err(Error::Shape("optimizer state size changed".into()));
                }
                adam.step += 1;
                let AdamConfig { beta1, beta2, eps } = adam.config;
                let bc1 = 1.0 - beta1.powi(adam.step as i32);
                let bc2 = 1.0 - beta2.powi(adam.step as i32);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = adam.m[i].data_mut();
                    let v = adam.v[i].data_mut();
                    for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
