//! One-dimensional hyperparameter sweeps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_edit, EditConfig, EditError, RunOptions};
use crate::predictor::PredictorBackend;
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Eta,
    Tau,
    /// Square patch side.
    Patch,
    Lr,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Eta => "eta",
            SweepAxis::Tau => "tau",
            SweepAxis::Patch => "patch",
            SweepAxis::Lr => "lr",
        }
    }

    /// Returns `base` with the axis set to `value`.
    pub fn apply(&self, base: &EditConfig, value: f64) -> Result<EditConfig, EditError> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Eta => cfg.eta = value,
            SweepAxis::Tau => cfg.tau = value,
            SweepAxis::Lr => cfg.learning_rate = value,
            SweepAxis::Patch => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(EditError::Config(format!("patch size must be a positive integer, got {value}")));
                }
                cfg.patch_h = value as usize;
                cfg.patch_w = value as usize;
            }
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eta" => Ok(SweepAxis::Eta),
            "tau" => Ok(SweepAxis::Tau),
            "patch" => Ok(SweepAxis::Patch),
            "lr" | "learning_rate" => Ok(SweepAxis::Lr),
            other => Err(format!("unknown sweep axis {other:?} (expected eta, tau, patch or lr)")),
        }
    }
}

/// One sweep cell. Failed cells carry NaN metrics and the error text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub dist_to_source: f64,
    pub dist_to_target: f64,
    pub weight_entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn run_cell(
    base: &EditConfig,
    schedule: &NoiseSchedule,
    axis: SweepAxis,
    value: f64,
    backend: &dyn PredictorBackend,
    x0_src: &LatentTensor,
    target_reference: Option<&LatentTensor>,
) -> SweepRow {
    let result = axis.apply(base, value).and_then(|cfg| {
        let out = run_edit(&cfg, schedule, backend, x0_src, &RunOptions::default())?;
        let to_source = out.latent.distance(x0_src).map_err(|e| EditError::Config(e.to_string()))?;
        let to_target = match target_reference {
            Some(r) => out.latent.distance(r).map_err(|e| EditError::Config(e.to_string()))?,
            None => f64::NAN,
        };
        Ok((to_source, to_target, out.trace.mean_weight_entropy()))
    });
    match result {
        Ok((dist_to_source, dist_to_target, weight_entropy)) => SweepRow {
            axis_value: value,
            dist_to_source,
            dist_to_target,
            weight_entropy,
            error: None,
        },
        Err(e) => SweepRow {
            axis_value: value,
            dist_to_source: f64::NAN,
            dist_to_target: f64::NAN,
            weight_entropy: f64::NAN,
            error: Some(e.to_string()),
        },
    }
}

/// Runs one edit per value. Rows come back in input order; a failing cell does
/// not stop the others. `dist_to_target` is NaN without a reference latent.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    base: &EditConfig,
    schedule: &NoiseSchedule,
    axis: SweepAxis,
    values: &[f64],
    backend: &dyn PredictorBackend,
    x0_src: &LatentTensor,
    target_reference: Option<&LatentTensor>,
    concurrent: bool,
) -> Result<Vec<SweepRow>, EditError> {
    if values.is_empty() {
        return Err(EditError::Config("sweep needs at least one value".into()));
    }
    let cell = |&v: &f64| run_cell(base, schedule, axis, v, backend, x0_src, target_reference);
    Ok(if concurrent {
        values.par_iter().map(cell).collect()
    } else {
        values.iter().map(cell).collect()
    })
}
