//! Noise predictors.
//!
//! A [`PredictorBackend`] answers `eps(z_t, condition, t, adapters)`. Two
//! backends ship with the engine: [`GaussianConceptModel`], whose optimal
//! noise prediction has a closed form, and [`RemoteBackend`], an HTTP client
//! for a diffusion-model bridge.

mod analytic;
mod remote;
pub mod wire;

use std::collections::BTreeSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::schedule::ScheduleError;
use crate::tensor::{AdapterSpec, ConditionRef, LatentTensor, Shape, TensorError};

pub use analytic::{AnalyticModelSpec, ConceptAdapter, GaussianConceptModel, OffsetSpec, Region};
pub use remote::{RemoteBackend, RemoteOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("unknown condition '{0}'")]
    UnknownCondition(String),
    #[error("unknown adapter '{0}'")]
    UnknownAdapter(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("protocol version mismatch: bridge speaks {found}, client expects {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend not ready: {0}")]
    NotReady(String),
    #[error("condition '{0}' already registered")]
    AlreadyRegistered(String),
    #[error("bridge returned {status}: {message}")]
    Server { status: u16, message: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What a backend serves. `None` means the set is only known server-side.
#[derive(Debug, Clone, PartialEq)]
pub struct Capabilities {
    pub shape: Shape,
    pub conditions: Option<BTreeSet<String>>,
    pub adapters: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, Copy)]
pub struct PredictRequest<'a> {
    pub latent: &'a LatentTensor,
    pub timestep: usize,
    pub condition: &'a ConditionRef,
    pub adapters: &'a [AdapterSpec],
}

pub trait PredictorBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Raw prediction; callers normally go through [`predict`], which validates
    /// the request and the returned shape.
    fn predict_raw(&self, request: &PredictRequest<'_>) -> Result<LatentTensor, PredictError>;
}

/// Noise prediction with request and response validation. An empty adapter
/// list selects the base model.
pub fn predict(
    backend: &dyn PredictorBackend,
    latent: &LatentTensor,
    timestep: usize,
    condition: &ConditionRef,
    adapters: &[AdapterSpec],
) -> Result<LatentTensor, PredictError> {
    let caps = backend.capabilities();
    if latent.shape() != caps.shape {
        return Err(PredictError::ShapeMismatch {
            expected: caps.shape,
            actual: latent.shape(),
        });
    }
    if let Some(conds) = &caps.conditions {
        if !conds.contains(condition.as_str()) {
            return Err(PredictError::UnknownCondition(condition.to_string()));
        }
    }
    if let Some(known) = &caps.adapters {
        if let Some(a) = adapters.iter().find(|a| !known.contains(&a.id)) {
            return Err(PredictError::UnknownAdapter(a.id.clone()));
        }
    }
    let eps = backend.predict_raw(&PredictRequest {
        latent,
        timestep,
        condition,
        adapters,
    })?;
    if eps.shape() != caps.shape {
        return Err(PredictError::ShapeMismatch {
            expected: caps.shape,
            actual: eps.shape(),
        });
    }
    Ok(eps)
}

/// Runs several independent predictions, optionally in parallel. Results keep
/// the input order.
pub fn predict_many(
    backend: &dyn PredictorBackend,
    requests: &[PredictRequest<'_>],
    parallel: bool,
) -> Result<Vec<LatentTensor>, PredictError> {
    let run = |r: &PredictRequest<'_>| predict(backend, r.latent, r.timestep, r.condition, r.adapters);
    if parallel && requests.len() > 1 {
        requests.par_iter().map(run).collect()
    } else {
        requests.iter().map(run).collect()
    }
}

/// `(1 + lambda) * positive - lambda * negative`, evaluated in `f64` per element.
pub fn combine_guidance(
    positive: &LatentTensor,
    negative: &LatentTensor,
    lambda: f64,
) -> Result<LatentTensor, PredictError> {
    if !lambda.is_finite() {
        return Err(PredictError::Protocol(format!("guidance scale {lambda} is not finite")));
    }
    positive.ensure_same_shape(negative)?;
    if lambda == 0.0 {
        return Ok(positive.clone());
    }
    Ok(positive.zip_map(negative, |p, n| {
        ((1.0 + lambda) * f64::from(p) - lambda * f64::from(n)) as f32
    })?)
}

/// Negative-prompt guided prediction. The negative branch runs with
/// `negative_adapters`, which callers usually leave empty (base model).
#[allow(clippy::too_many_arguments)]
pub fn guided_predict(
    backend: &dyn PredictorBackend,
    latent: &LatentTensor,
    timestep: usize,
    positive: &ConditionRef,
    negative: &ConditionRef,
    lambda: f64,
    adapters: &[AdapterSpec],
    negative_adapters: &[AdapterSpec],
) -> Result<LatentTensor, PredictError> {
    let pos = predict(backend, latent, timestep, positive, adapters)?;
    if lambda == 0.0 {
        return Ok(pos);
    }
    let neg = predict(backend, latent, timestep, negative, negative_adapters)?;
    combine_guidance(&pos, &neg, lambda)
}
