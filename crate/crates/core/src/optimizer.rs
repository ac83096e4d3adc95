//! Adam with bias correction and a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::network::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimizerError {
    #[error("gradient of `{name}` is not finite at flat index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("gradient of `{name}` has shape {actual:?}, parameter has {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("expected {expected} gradient slots, got {actual}")]
    Count { expected: usize, actual: usize },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale all gradients so their joint L2 norm is at most this value.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimizerError::Config(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(OptimizerError::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(OptimizerError::Config(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Moment estimates for every parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Ok(Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update with learning rate `lr`.
    ///
    /// Per element, with `g` the gradient:
    ///
    /// ```text
    /// m = β1·m + (1-β1)·g
    /// v = β2·v + (1-β2)·g²
    /// p = p - lr · (m / (1-β1^t)) / (sqrt(v / (1-β2^t)) + ε)
    /// ```
    ///
    /// A parameter whose gradient slot is `None` is left untouched,
    /// moments included. Non-finite gradients are rejected before any
    /// parameter changes.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(OptimizerError::Count {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(OptimizerError::Shape {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        actual: g.shape().to_vec(),
                    });
                }
                if let Some(index) = g.first_non_finite() {
                    return Err(OptimizerError::NonFiniteGradient {
                        name: p.name.clone(),
                        index,
                    });
                }
            }
        }

        let clip = match self.config.clip_norm {
            Some(max) => {
                let sq: f64 = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.data().iter())
                    .map(|&x| Element::to_f64(x) * Element::to_f64(x))
                    .sum();
                let norm = sq.sqrt();
                (norm > max).then(|| T::from_f64(max / norm))
            }
            None => None,
        };

        self.t += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let eps = T::from_f64(c.eps);
        let lr = T::from_f64(lr);

        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.by_id_mut(id).value.data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for i in 0..p.len() {
                let gi = match clip {
                    Some(s) => g.data()[i] * s,
                    None => g.data()[i],
                };
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr(epoch) = base · factor^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub period: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.001,
            factor: 0.1,
            period: 40,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !(self.factor > 0.0) || self.period == 0 {
            return Err(OptimizerError::Config(format!(
                "schedule needs positive base, factor and period, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `epoch`, decayed by repeated
    /// multiplication. With the defaults this yields exactly the `f64`
    /// literals 0.001, 0.0001 and 0.00001.
    pub fn lr(&self, epoch: u32) -> f64 {
        let mut lr = self.base;
        for _ in 0..epoch / self.period {
            lr *= self.factor;
        }
        lr
    }
}
