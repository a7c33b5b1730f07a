//! AdamW, a per-epoch cosine learning-rate schedule, and gradient accumulation.
//!
//! ```text
//! theta <- theta * (1 - lr * wd)          (weights only)
//! m     <- b1 * m + (1 - b1) * g
//! v     <- b2 * v + (1 - b2) * g^2
//! theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient {value} at index {index}")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("length mismatch: {params} parameters, {grad} gradient entries")]
    Length { params: usize, grad: usize },
    #[error("epoch {epoch} outside schedule range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid hyperparameter: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OptimError::Config("betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return Err(OptimError::Config("epsilon must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    /// Entries with `true` receive weight decay.
    decay_mask: Vec<bool>,
}

impl AdamW {
    /// Every parameter decays.
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        Self::with_decay_mask(config, vec![true; len])
    }

    pub fn with_decay_mask(config: AdamWConfig, decay_mask: Vec<bool>) -> Self {
        let len = decay_mask.len();
        AdamW { config, m: vec![0.0; len], v: vec![0.0; len], step_count: 0, decay_mask }
    }

    /// One update. On a non-finite gradient nothing is modified.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<(), OptimError> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(OptimError::Length { params: params.len(), grad: grad.len() });
        }
        if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index, value });
        }
        let AdamWConfig { beta1, beta2, epsilon, weight_decay } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for i in 0..params.len() {
            let g = grad[i];
            if self.decay_mask[i] && weight_decay != 0.0 {
                params[i] *= decay;
            }
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_epochs: usize) -> Result<Self, OptimError> {
        if !(lr_min > 0.0 && lr_min <= lr_max && lr_max.is_finite()) {
            return Err(OptimError::Config(format!("need 0 < lr_min <= lr_max, got {lr_min}, {lr_max}")));
        }
        if total_epochs == 0 {
            return Err(OptimError::Config("total_epochs must be at least 1".into()));
        }
        Ok(CosineSchedule { lr_max, lr_min, total_epochs })
    }

    /// `lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64, OptimError> {
        if epoch > self.total_epochs {
            return Err(OptimError::EpochOutOfRange { epoch, total: self.total_epochs });
        }
        if epoch == 0 {
            return Ok(self.lr_max);
        }
        if epoch == self.total_epochs {
            return Ok(self.lr_min);
        }
        // cos(pi / 2) is not exactly 0 in floating point
        if 2 * epoch == self.total_epochs {
            return Ok(0.5 * (self.lr_max + self.lr_min));
        }
        let phase = PI * epoch as f64 / self.total_epochs as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos()))
    }
}

/// Averages micro-batch gradients and emits their mean every
/// `accumulation_steps` pushes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pending: Vec<f64>,
    seen: usize,
    accumulation_steps: usize,
}

impl GradAccumulator {
    pub fn new(len: usize, accumulation_steps: usize) -> Self {
        assert!(accumulation_steps >= 1, "accumulation_steps must be at least 1");
        GradAccumulator { pending: vec![0.0; len], seen: 0, accumulation_steps }
    }

    pub fn pending_count(&self) -> usize {
        self.seen
    }

    pub fn push(&mut self, micro_grad: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(micro_grad.len(), self.pending.len(), "gradient length");
        for (p, g) in self.pending.iter_mut().zip(micro_grad) {
            *p += g;
        }
        self.seen += 1;
        if self.seen == self.accumulation_steps {
            self.flush()
        } else {
            None
        }
    }

    /// Emits the mean of whatever is pending (used at epoch end).
    pub fn flush(&mut self) -> Option<Vec<f64>> {
        if self.seen == 0 {
            return None;
        }
        let n = self.seen as f64;
        let out = self.pending.iter().map(|p| p / n).collect();
        self.pending.fill(0.0);
        self.seen = 0;
        Some(out)
    }
}
