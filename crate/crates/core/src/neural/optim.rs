//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::net::Parameter;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap on the gradient; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    pub step: u64,
}

/// Scales `grads` in place so their global norm is at most `clip`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor2], clip: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if norm > clip {
        let k = clip / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[Parameter]) -> Self {
        let zeros: Vec<Tensor2> = params.iter().map(|p| Tensor2::zeros(p.value.rows(), p.value.cols())).collect();
        OptimizerState { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Applies one clipped Adam update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [Parameter], mut grads: Vec<Tensor2>) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient shape {:?} for parameter {}", g.shape(), p.name)));
            }
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for parameter {}", p.name)));
            }
        }
        let norm = match self.config.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt(),
        };
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
