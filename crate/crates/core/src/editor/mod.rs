//! The editing loop.
//!
//! `x0_tgt` starts at the source latent and is updated once per timestep of a
//! strictly descending plan. At each step both branches are noised (with the
//! same draw when `shared_noise` is set), the source branch is predicted by the
//! guided base model and the target branch by the guided, dynamically weighted
//! adapter composite, and the selected objective's gradient is applied.

mod compare;
mod sweep;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{
    apply_update, cds_grad, dds_grad, sds_grad, DistillError, GradConfig, GradResult,
    RegularizerMode, TimeWeighting,
};
use crate::predictor::{combine_guidance, guided_predict, predict, PredictError, PredictorBackend};
use crate::rng::NoiseSource;
use crate::schedule::{NoiseSchedule, ScheduleError, TimestepPlan};
use crate::tensor::{AdapterSpec, ConditionRef, LatentTensor, TensorError};
use crate::weighting::{dynamic_weighted_predict, PatchSize, WeightingError};

pub use compare::{compare_objectives, mean_abs_laplacian, ObjectiveComparison};
pub use sweep::{run_sweep, SweepAxis, SweepRow};

#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid edit config: {0}")]
    Config(String),
    #[error("backend failure at step {step} (t={t}): {source}")]
    Backend {
        step: usize,
        t: usize,
        #[source]
        source: PredictError,
    },
    #[error("non-finite values at step {step} (t={t}): {detail}")]
    NonFinite { step: usize, t: usize, detail: String },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl EditError {
    /// Whether the error is a numerical abort.
    pub fn is_numerical(&self) -> bool {
        matches!(self, EditError::NonFinite { .. })
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, EditError::Backend { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sds,
    Dds,
    #[default]
    Cds,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Sds, Objective::Dds, Objective::Cds];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Sds => "sds",
            Objective::Dds => "dds",
            Objective::Cds => "cds",
        }
    }
}

fn cond(name: &str) -> ConditionRef {
    ConditionRef::new(name).expect("non-empty default condition")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub steps: usize,
    pub t_max: usize,
    pub t_min: usize,
    pub eta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub patch_h: usize,
    pub patch_w: usize,
    pub learning_rate: f64,
    pub shared_noise: bool,
    pub regularizer_mode: RegularizerMode,
    pub w_t: TimeWeighting,
    pub objective: Objective,
    pub seed: u64,
    pub source_cond: ConditionRef,
    pub target_cond: ConditionRef,
    pub negative_cond: ConditionRef,
    pub target_adapters: Vec<AdapterSpec>,
    pub source_adapters: Vec<AdapterSpec>,
    pub negative_adapters: Vec<AdapterSpec>,
    /// Issue the independent predictions of a step concurrently.
    pub parallel: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            t_max: 970,
            t_min: 30,
            eta: 0.5,
            lambda: 10.0,
            tau: 0.002,
            patch_h: 2,
            patch_w: 2,
            learning_rate: 0.2,
            shared_noise: true,
            regularizer_mode: RegularizerMode::L2Signed,
            w_t: TimeWeighting::default(),
            objective: Objective::Cds,
            seed: 0,
            source_cond: cond("source"),
            target_cond: cond("target"),
            negative_cond: cond("negative"),
            target_adapters: Vec::new(),
            source_adapters: Vec::new(),
            negative_adapters: Vec::new(),
            parallel: false,
        }
    }
}

impl EditConfig {
    pub fn patch(&self) -> PatchSize {
        PatchSize::new(self.patch_h, self.patch_w)
    }

    pub fn grad_config(&self) -> GradConfig {
        GradConfig {
            eta: self.eta,
            regularizer_mode: self.regularizer_mode,
            learning_rate: self.learning_rate,
        }
    }

    pub fn plan(&self) -> Result<TimestepPlan, ScheduleError> {
        TimestepPlan::linear(self.steps, self.t_max, self.t_min)
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<TimestepPlan, EditError> {
        self.grad_config()
            .validate()
            .map_err(|e| EditError::Config(e.to_string()))?;
        if !self.lambda.is_finite() {
            return Err(EditError::Config(format!("lambda must be finite, got {}", self.lambda)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(EditError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(EditError::Config("patch dimensions must be positive".into()));
        }
        let plan = self.plan()?;
        plan.check_within(schedule)?;
        Ok(plan)
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub grad_norm: f64,
    pub grad_max_abs: f64,
    pub noise_delta_norm: f64,
    pub regularizer_norm: f64,
    pub weight_entropy: f64,
    pub dist_to_source: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditTrace {
    pub objective: Objective,
    pub records: Vec<StepRecord>,
    /// Per-step gradients, kept when [`RunOptions::record_gradients`] is set.
    pub gradients: Vec<LatentTensor>,
}

impl EditTrace {
    pub fn mean_weight_entropy(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.weight_entropy).sum::<f64>() / self.records.len() as f64
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), EditError> {
        let file = std::fs::File::create(path).map_err(|e| EditError::Io(format!("{}: {e}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| EditError::Io(format!("{}: {e}", path.display())))
    }

    /// Writes `step_XXXX_tYYYY.cdst` for every recorded gradient.
    pub fn dump_gradients(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>, EditError> {
        std::fs::create_dir_all(dir).map_err(|e| EditError::Io(format!("{}: {e}", dir.display())))?;
        let mut paths = Vec::with_capacity(self.gradients.len());
        for (g, r) in self.gradients.iter().zip(&self.records) {
            let path = dir.join(format!("step_{:04}_t{:04}.cdst", r.step, r.t));
            g.write_cdst(&path).map_err(|e| EditError::Io(e.to_string()))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub record_gradients: bool,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub latent: LatentTensor,
    pub trace: EditTrace,
}

struct StepContext<'a> {
    cfg: &'a EditConfig,
    backend: &'a dyn PredictorBackend,
    step: usize,
    t: usize,
}

impl StepContext<'_> {
    fn backend_err(&self, e: PredictError) -> EditError {
        EditError::Backend {
            step: self.step,
            t: self.t,
            source: e,
        }
    }

    fn numeric_err(&self, detail: impl ToString) -> EditError {
        EditError::NonFinite {
            step: self.step,
            t: self.t,
            detail: detail.to_string(),
        }
    }

    fn predict_err(&self, e: PredictError) -> EditError {
        match e {
            PredictError::Tensor(TensorError::NonFinite { .. }) => self.numeric_err(e),
            other => self.backend_err(other),
        }
    }

    fn weighting_err(&self, e: WeightingError) -> EditError {
        match e {
            WeightingError::Predict(p) => self.predict_err(p),
            WeightingError::Tensor(t @ TensorError::NonFinite { .. }) => self.numeric_err(t),
            other => EditError::Config(other.to_string()),
        }
    }

    fn distill_err(&self, e: DistillError) -> EditError {
        match e {
            DistillError::InvalidConfig(m) => EditError::Config(m),
            DistillError::Tensor(TensorError::ShapeMismatch { .. }) => EditError::Config(e.to_string()),
            other => self.numeric_err(other),
        }
    }

    /// Guided target prediction; returns it with the mean weight entropy.
    fn target_prediction(&self, z: &LatentTensor) -> Result<(LatentTensor, f64), EditError> {
        let cfg = self.cfg;
        let (positive, entropy) = if cfg.target_adapters.is_empty() {
            let p = predict(self.backend, z, self.t, &cfg.target_cond, &[])
                .map_err(|e| self.predict_err(e))?;
            (p, 0.0)
        } else {
            let c = dynamic_weighted_predict(
                self.backend,
                &cfg.target_adapters,
                z,
                self.t,
                &cfg.target_cond,
                cfg.patch(),
                cfg.tau,
                cfg.parallel,
            )
            .map_err(|e| self.weighting_err(e))?;
            (c.eps, c.weights.mean_entropy())
        };
        if cfg.lambda == 0.0 {
            return Ok((positive, entropy));
        }
        let negative = predict(self.backend, z, self.t, &cfg.negative_cond, &cfg.negative_adapters)
            .map_err(|e| self.predict_err(e))?;
        let guided = combine_guidance(&positive, &negative, cfg.lambda).map_err(|e| self.predict_err(e))?;
        Ok((guided, entropy))
    }

    fn source_prediction(&self, z: &LatentTensor) -> Result<LatentTensor, EditError> {
        let cfg = self.cfg;
        guided_predict(
            self.backend,
            z,
            self.t,
            &cfg.source_cond,
            &cfg.negative_cond,
            cfg.lambda,
            &cfg.source_adapters,
            &cfg.negative_adapters,
        )
        .map_err(|e| self.predict_err(e))
    }
}

/// Runs the full edit and returns the optimized latent with its trace.
pub fn run_edit(
    cfg: &EditConfig,
    schedule: &NoiseSchedule,
    backend: &dyn PredictorBackend,
    x0_src: &LatentTensor,
    options: &RunOptions,
) -> Result<EditOutcome, EditError> {
    let plan = cfg.validate(schedule)?;
    let shape = backend.capabilities().shape;
    if x0_src.shape() != shape {
        return Err(EditError::Config(format!(
            "source latent is {} but the backend serves {shape}",
            x0_src.shape()
        )));
    }
    let grad_cfg = cfg.grad_config();
    let mut noise = NoiseSource::new(cfg.seed);
    let mut x_tgt = x0_src.clone();
    let mut records = Vec::with_capacity(plan.len());
    let mut gradients = Vec::new();

    for (step, &t) in plan.steps().iter().enumerate() {
        let ctx = StepContext {
            cfg,
            backend,
            step,
            t,
        };
        let eps = noise.gaussian(shape);
        let eps_src = if cfg.shared_noise {
            eps.clone()
        } else {
            noise.gaussian(shape)
        };
        let z_tgt = schedule.add_noise(&x_tgt, &eps, t).map_err(|e| ctx.numeric_err(e))?;
        let w_t = cfg.w_t.weight(t, schedule)?;

        let (grad, entropy): (GradResult, f64) = match cfg.objective {
            Objective::Sds => {
                let (eps_tgt, entropy) = ctx.target_prediction(&z_tgt)?;
                (sds_grad(&eps_tgt, &eps, w_t).map_err(|e| ctx.distill_err(e))?, entropy)
            }
            Objective::Dds | Objective::Cds => {
                let z_src = schedule
                    .add_noise(x0_src, &eps_src, t)
                    .map_err(|e| ctx.numeric_err(e))?;
                let (target, source) = if cfg.parallel {
                    rayon::join(|| ctx.target_prediction(&z_tgt), || ctx.source_prediction(&z_src))
                } else {
                    (ctx.target_prediction(&z_tgt), ctx.source_prediction(&z_src))
                };
                let (eps_tgt, entropy) = target?;
                let eps_src_hat = source?;
                let g = if cfg.objective == Objective::Dds {
                    dds_grad(&eps_tgt, &eps_src_hat, w_t)
                } else {
                    cds_grad(&eps_tgt, &eps_src_hat, &x_tgt, x0_src, &grad_cfg, w_t)
                };
                (g.map_err(|e| ctx.distill_err(e))?, entropy)
            }
        };

        x_tgt = apply_update(&x_tgt, &grad.grad, cfg.learning_rate, step).map_err(|e| ctx.distill_err(e))?;
        records.push(StepRecord {
            step,
            t,
            grad_norm: grad.grad.norm(),
            grad_max_abs: f64::from(grad.grad.max_abs()),
            noise_delta_norm: grad.noise_delta_norm,
            regularizer_norm: grad.regularizer_norm,
            weight_entropy: entropy,
            dist_to_source: x_tgt.distance(x0_src).map_err(|e| EditError::Config(e.to_string()))?,
        });
        if options.record_gradients {
            gradients.push(grad.grad);
        }
    }

    Ok(EditOutcome {
        latent: x_tgt,
        trace: EditTrace {
            objective: cfg.objective,
            records,
            gradients,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{AnalyticModelSpec, GaussianConceptModel};
    use crate::tensor::Shape;

    fn model() -> GaussianConceptModel {
        let spec: AnalyticModelSpec = serde_json::from_str(
            r#"{
                "shape": [2, 4, 4],
                "variance": 5.0,
                "base_mean": [0.2, -0.1],
                "conditions": {"source": {}, "target": {"offset": [0.5]}, "negative": {}},
                "adapters": {
                    "a": {"offset": [1.0, -1.0], "region": {"top": 0, "left": 0, "height": 2, "width": 2}},
                    "b": {"offset": [-1.0, 0.5], "region": {"top": 2, "left": 2, "height": 2, "width": 2}}
                }
            }"#,
        )
        .unwrap();
        GaussianConceptModel::from_spec(&spec, NoiseSchedule::stable_diffusion()).unwrap()
    }

    fn source(m: &GaussianConceptModel) -> LatentTensor {
        m.concept_mean(&cond("source"), &[]).unwrap()
    }

    fn small_cfg() -> EditConfig {
        EditConfig {
            steps: 20,
            target_adapters: vec![AdapterSpec::new("a", 0.8).unwrap(), AdapterSpec::new("b", 0.8).unwrap()],
            ..Default::default()
        }
    }

    #[test]
    fn identity_edit_leaves_source_untouched() {
        let m = model();
        let src = source(&m);
        let cfg = EditConfig {
            steps: 15,
            target_cond: cond("source"),
            ..Default::default()
        };
        let out = run_edit(&cfg, m.schedule(), &m, &src, &RunOptions::default()).unwrap();
        assert_eq!(out.latent, src);
        assert!(out.trace.records.iter().all(|r| r.grad_max_abs == 0.0));
    }

    #[test]
    fn trace_has_one_record_per_step_in_descending_order() {
        let m = model();
        let out = run_edit(&small_cfg(), m.schedule(), &m, &source(&m), &RunOptions { record_gradients: true }).unwrap();
        assert_eq!(out.trace.records.len(), 20);
        assert_eq!(out.trace.gradients.len(), 20);
        assert!(out.trace.records.windows(2).all(|w| w[1].t < w[0].t));
        assert!(out.trace.records.iter().all(|r| r.dist_to_source >= 0.0));
        assert!(out.trace.mean_weight_entropy() > 0.0);
    }

    #[test]
    fn runs_are_deterministic_and_parallel_matches_serial() {
        let m = model();
        let src = source(&m);
        let cfg = small_cfg();
        let a = run_edit(&cfg, m.schedule(), &m, &src, &RunOptions::default()).unwrap();
        let b = run_edit(&cfg, m.schedule(), &m, &src, &RunOptions::default()).unwrap();
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.trace, b.trace);
        let par = EditConfig { parallel: true, ..cfg };
        let c = run_edit(&par, m.schedule(), &m, &src, &RunOptions::default()).unwrap();
        assert_eq!(a.latent, c.latent);
    }

    #[test]
    fn unshared_noise_changes_the_run() {
        let m = model();
        let src = source(&m);
        let a = run_edit(&small_cfg(), m.schedule(), &m, &src, &RunOptions::default()).unwrap();
        let cfg = EditConfig { shared_noise: false, ..small_cfg() };
        let b = run_edit(&cfg, m.schedule(), &m, &src, &RunOptions::default()).unwrap();
        assert_ne!(a.latent, b.latent);
    }

    #[test]
    fn errors_are_classified() {
        let m = model();
        let src = source(&m);
        let cfg = EditConfig { target_cond: cond("missing"), ..small_cfg() };
        let err = run_edit(&cfg, m.schedule(), &m, &src, &RunOptions::default()).unwrap_err();
        assert!(err.is_backend(), "{err}");
        assert!(matches!(err, EditError::Backend { step: 0, t: 970, .. }));

        let cfg = EditConfig { learning_rate: 0.0, ..small_cfg() };
        assert!(matches!(
            run_edit(&cfg, m.schedule(), &m, &src, &RunOptions::default()),
            Err(EditError::Config(_))
        ));

        let wrong = LatentTensor::zeros(Shape::new(1, 4, 4).unwrap());
        assert!(matches!(
            run_edit(&small_cfg(), m.schedule(), &m, &wrong, &RunOptions::default()),
            Err(EditError::Config(_))
        ));

        let cfg = EditConfig { patch_h: 3, patch_w: 3, ..small_cfg() };
        assert!(matches!(
            run_edit(&cfg, m.schedule(), &m, &src, &RunOptions::default()),
            Err(EditError::Config(_))
        ));

        // lr * eta far beyond 2 blows the latent up.
        let cfg = EditConfig { eta: 1e30, learning_rate: 1e10, steps: 50, ..small_cfg() };
        let err = run_edit(&cfg, m.schedule(), &m, &src, &RunOptions::default()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn trace_jsonl_has_one_line_per_step() {
        let m = model();
        let out = run_edit(&small_cfg(), m.schedule(), &m, &source(&m), &RunOptions::default()).unwrap();
        let mut buf = Vec::new();
        out.trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 20);
        let first: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, out.trace.records[0]);
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg: EditConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, EditConfig::default());
        assert_eq!(cfg.steps, 300);
        assert!(serde_json::from_str::<EditConfig>(r#"{"bogus": 1}"#).is_err());
        let round: EditConfig = serde_json::from_str(&serde_json::to_string(&small_cfg()).unwrap()).unwrap();
        assert_eq!(round, small_cfg());
    }
}
