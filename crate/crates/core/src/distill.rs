//! Distillation gradients and the latent update step.
//!
//! The optimized parameter is the latent itself, so every `d x0 / d theta`
//! factor is the identity and gradients are plain tensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{NoiseSchedule, ScheduleError};
use crate::tensor::{LatentTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("invalid gradient config: {0}")]
    InvalidConfig(String),
    #[error("update at step {step} produced a non-finite latent")]
    NonFiniteUpdate { step: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Form of the latent-alignment term added to the noise delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    /// `eta * (x_tgt - x_src)`: gradient of `(eta / 2) * |x_tgt - x_src|^2`.
    #[default]
    L2Signed,
    /// `eta * sign(x_tgt - x_src)`.
    L1Sign,
    /// `eta * |x_tgt - x_src|`, elementwise absolute value.
    LiteralAbs,
}

/// Time weighting `w(t)` applied to noise residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeWeighting {
    Constant { value: f64 },
    /// `w(t) = 1 - alpha_bar_t`.
    OneMinusAlphaBar,
}

impl Default for TimeWeighting {
    fn default() -> Self {
        TimeWeighting::Constant { value: 1.0 }
    }
}

impl TimeWeighting {
    pub fn weight(&self, t: usize, schedule: &NoiseSchedule) -> Result<f64, ScheduleError> {
        match *self {
            TimeWeighting::Constant { value } => Ok(value),
            TimeWeighting::OneMinusAlphaBar => Ok(1.0 - schedule.alpha_bar(t)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradConfig {
    pub eta: f64,
    pub regularizer_mode: RegularizerMode,
    pub learning_rate: f64,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            regularizer_mode: RegularizerMode::L2Signed,
            learning_rate: 0.2,
        }
    }
}

impl GradConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(DistillError::InvalidConfig(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DistillError::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub grad: LatentTensor,
    pub noise_delta_norm: f64,
    pub regularizer_norm: f64,
}

fn weighted_delta(a: &LatentTensor, b: &LatentTensor, w: f64) -> Result<LatentTensor, TensorError> {
    if w == 1.0 {
        return a.sub(b);
    }
    let w = w as f32;
    a.zip_map(b, |x, y| w * (x - y))
}

/// `w(t) * (eps_pred - eps_sampled)`.
pub fn sds_grad(
    eps_pred: &LatentTensor,
    eps_sampled: &LatentTensor,
    w_t: f64,
) -> Result<GradResult, DistillError> {
    let grad = weighted_delta(eps_pred, eps_sampled, w_t)?;
    Ok(GradResult {
        noise_delta_norm: grad.norm(),
        regularizer_norm: 0.0,
        grad,
    })
}

/// `w(t) * (eps_tgt - eps_src)`.
pub fn dds_grad(
    eps_tgt: &LatentTensor,
    eps_src: &LatentTensor,
    w_t: f64,
) -> Result<GradResult, DistillError> {
    sds_grad(eps_tgt, eps_src, w_t)
}

/// Noise delta plus the latent-alignment term. With `eta = 0` the result is
/// bitwise the [`dds_grad`] output.
pub fn cds_grad(
    eps_tgt: &LatentTensor,
    eps_src: &LatentTensor,
    x0_tgt: &LatentTensor,
    x0_src: &LatentTensor,
    cfg: &GradConfig,
    w_t: f64,
) -> Result<GradResult, DistillError> {
    cfg.validate()?;
    let noise = dds_grad(eps_tgt, eps_src, w_t)?;
    x0_tgt.ensure_same_shape(x0_src)?;
    x0_tgt.ensure_same_shape(&noise.grad)?;
    if cfg.eta == 0.0 {
        return Ok(noise);
    }
    let eta = cfg.eta as f32;
    let reg = match cfg.regularizer_mode {
        RegularizerMode::L2Signed => x0_tgt.zip_map(x0_src, |t, s| eta * (t - s))?,
        RegularizerMode::L1Sign => x0_tgt.zip_map(x0_src, |t, s| {
            let d = t - s;
            if d > 0.0 {
                eta
            } else if d < 0.0 {
                -eta
            } else {
                0.0
            }
        })?,
        RegularizerMode::LiteralAbs => x0_tgt.zip_map(x0_src, |t, s| eta * (t - s).abs())?,
    };
    let grad = reg.add(&noise.grad)?;
    Ok(GradResult {
        grad,
        noise_delta_norm: noise.noise_delta_norm,
        regularizer_norm: reg.norm(),
    })
}

/// One gradient-descent step, `latent - lr * grad`.
pub fn apply_update(
    latent: &LatentTensor,
    grad: &LatentTensor,
    lr: f64,
    step: usize,
) -> Result<LatentTensor, DistillError> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(DistillError::InvalidConfig(format!("learning rate must be > 0, got {lr}")));
    }
    let lr = lr as f32;
    latent.zip_map(grad, |x, g| x - lr * g).map_err(|e| match e {
        TensorError::NonFinite { .. } => DistillError::NonFiniteUpdate { step },
        other => other.into(),
    })
}
