//! Bias-corrected Adam.

use crate::autodiff::Mat;
use crate::error::{NeuralError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Mat]) -> Result<Self> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(config.beta1) || !ok(config.beta2) || !(config.learning_rate > 0.0) || !(config.eps > 0.0) {
            return Err(NeuralError::Config(format!("invalid Adam settings {config:?}")));
        }
        let zeros = || params.iter().map(|p| Mat::zeros(p.nrows(), p.ncols())).collect();
        Ok(Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Fails without touching anything if a gradient is
    /// non-finite or shapes disagree.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NeuralError::Shape(format!(
                "Adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[k].shape() || g.shape() != self.m[k].shape() {
                return Err(NeuralError::Shape(format!("Adam tensor {k} changed shape")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NeuralError::NonFinite(format!("gradient of tensor {k}")));
            }
        }
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
