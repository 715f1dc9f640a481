//! Run-config file: `engine`, `schedule`, `backend` and `output` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cds_core::predictor::AnalyticModelSpec;
use cds_core::{BetaSchedule, EditConfig, NoiseSchedule};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub engine: EditConfig,
    pub schedule: ScheduleSection,
    pub backend: BackendSection,
    pub output: OutputSection,
}

/// `t_max` / `t_min` here take precedence over the engine section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: BetaSchedule,
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_min: Option<usize>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: BetaSchedule::ScaledLinear,
            num_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            t_max: None,
            t_min: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Analytic,
    Remote,
}

/// A text condition to register at a remote bridge before running.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionText {
    pub name: String,
    pub text: String,
    #[serde(default)]
    pub negative: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Expected checkpoint; checked against the bridge's `/health` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_spec: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<ConditionText>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic: Option<AnalyticModelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub dump_gradients: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            dump_gradients: false,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: Self =
            serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.normalize();
        Ok(cfg)
    }

    /// Folds the schedule window into the engine so both sections agree.
    pub fn normalize(&mut self) {
        if let Some(t) = self.schedule.t_max {
            self.engine.t_max = t;
        }
        if let Some(t) = self.schedule.t_min {
            self.engine.t_min = t;
        }
        self.schedule.t_max = Some(self.engine.t_max);
        self.schedule.t_min = Some(self.engine.t_min);
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        NoiseSchedule::new(s.kind, s.num_steps, s.beta_start, s.beta_end)
            .map_err(|e| CliError::config(format!("schedule: {e}")))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
