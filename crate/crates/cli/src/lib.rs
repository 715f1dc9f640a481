//! Command implementations behind the `cds` binary.

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cds_core::editor::{compare_objectives, EditOutcome};
use cds_core::predictor::wire::PROTOCOL_VERSION;
use cds_core::predictor::{predict, GaussianConceptModel, PredictError};
use cds_core::{
    run_edit, run_sweep, ConditionRef, EditError, LatentTensor, NoiseSchedule, PredictorBackend, RemoteBackend,
    RunOptions, SweepAxis,
};

pub use config::{BackendKind, RunConfigFile};

pub const BACKEND_URL_ENV: &str = "CDS_BACKEND_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Backend,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Backend => 2,
            ErrorKind::Numerical => 3,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Backend => "backend",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Backend,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// Single line: `error kind=<config|backend|numerical> code=<n>: <message>`.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat = self.message.replace(['\n', '\r'], " ");
        write!(f, "error kind={} code={}: {flat}", self.kind.label(), self.exit_code())
    }
}

impl From<EditError> for CliError {
    fn from(e: EditError) -> Self {
        let kind = if e.is_backend() {
            ErrorKind::Backend
        } else if e.is_numerical() {
            ErrorKind::Numerical
        } else {
            ErrorKind::Config
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::config(format!("{}: {e}", path.display()))
}

/// Flags shared by the commands that run the engine.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub source: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backend_url: Option<String>,
    pub dump_gradients: bool,
}

pub enum Backend {
    Analytic(GaussianConceptModel),
    Remote(RemoteBackend),
}

impl Backend {
    pub fn as_dyn(&self) -> &dyn PredictorBackend {
        match self {
            Backend::Analytic(m) => m,
            Backend::Remote(r) => r,
        }
    }

    /// Reference latent for the target concept, known only analytically.
    pub fn target_reference(&self, cfg: &RunConfigFile) -> Option<LatentTensor> {
        match self {
            Backend::Analytic(m) => m.concept_mean(&cfg.engine.target_cond, &cfg.engine.target_adapters).ok(),
            Backend::Remote(_) => None,
        }
    }
}

/// A loaded run: effective config, schedule and connected backend.
pub struct Session {
    pub config: RunConfigFile,
    pub schedule: NoiseSchedule,
    pub backend: Backend,
}

fn resolve_url(flag: Option<&str>, config: Option<&str>) -> Option<String> {
    flag.map(str::to_string)
        .or_else(|| config.map(str::to_string))
        .or_else(|| std::env::var(BACKEND_URL_ENV).ok().filter(|s| !s.is_empty()))
}

fn connect_remote(url: &str) -> Result<RemoteBackend, CliError> {
    RemoteBackend::connect(url).map_err(|e| CliError::backend(format!("stage=health {url}: {e}")))
}

impl Session {
    pub fn open(args: &RunArgs) -> Result<Self, CliError> {
        let mut config = RunConfigFile::load(&args.config)?;
        if let Some(out) = &args.out {
            config.output.dir = out.clone();
        }
        if args.dump_gradients {
            config.output.dump_gradients = true;
        }
        let schedule = config.noise_schedule()?;
        let backend = match config.backend.kind {
            BackendKind::Analytic => {
                let spec = config
                    .backend
                    .analytic
                    .as_ref()
                    .ok_or_else(|| CliError::config("backend.kind is analytic but backend.analytic is missing"))?;
                let model = GaussianConceptModel::from_spec(spec, schedule.clone())
                    .map_err(|e| CliError::config(format!("backend.analytic: {e}")))?;
                Backend::Analytic(model)
            }
            BackendKind::Remote => {
                let url = resolve_url(args.backend_url.as_deref(), config.backend.url.as_deref()).ok_or_else(|| {
                    CliError::config(format!("remote backend needs --backend-url, backend.url or {BACKEND_URL_ENV}"))
                })?;
                let remote = connect_remote(&url)?;
                if let Some(expected) = &config.backend.model_spec {
                    if expected != remote.model_spec() {
                        return Err(CliError::backend(format!(
                            "bridge serves model {:?}, config expects {expected:?}",
                            remote.model_spec()
                        )));
                    }
                }
                for c in &config.backend.conditions {
                    match remote.register_condition(&c.name, &c.text, c.negative) {
                        Ok(()) | Err(PredictError::AlreadyRegistered(_)) => {}
                        Err(e) => return Err(CliError::backend(format!("stage=register {}: {e}", c.name))),
                    }
                }
                config.backend.url = Some(url);
                Backend::Remote(remote)
            }
        };
        Ok(Self {
            config,
            schedule,
            backend,
        })
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = self.config.output.dir.as_path();
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(dir)
    }

    fn write_effective_config(&self) -> Result<(), CliError> {
        let path = self.out_dir()?.join("config.json");
        fs::write(&path, self.config.to_pretty_json()).map_err(|e| io_err(&path, e))
    }

    /// Loads `--source`: CDST directly, or an image through the bridge VAE.
    /// Without a path the analytic backend's source concept mean is used.
    pub fn load_source(&self, path: Option<&Path>) -> Result<(LatentTensor, bool), CliError> {
        let Some(path) = path else {
            return match &self.backend {
                Backend::Analytic(m) => m
                    .concept_mean(&self.config.engine.source_cond, &self.config.engine.source_adapters)
                    .map(|t| (t, false))
                    .map_err(|e| CliError::config(format!("source concept: {e}"))),
                Backend::Remote(_) => Err(CliError::config("--source is required with a remote backend")),
            };
        };
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        if bytes.starts_with(b"CDST") {
            return LatentTensor::from_cdst_bytes(&bytes)
                .map(|t| (t, false))
                .map_err(|e| io_err(path, e));
        }
        match &self.backend {
            Backend::Remote(r) => r
                .encode_image(&bytes)
                .map(|t| (t, true))
                .map_err(|e| CliError::backend(format!("stage=encode {}: {e}", path.display()))),
            Backend::Analytic(_) => Err(io_err(
                path,
                "not a CDST file (images are accepted only with a remote backend)",
            )),
        }
    }
}

#[derive(Debug, Serialize)]
struct EditSummary<'a> {
    objective: &'a str,
    steps: usize,
    seed: u64,
    final_dist_to_source: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_dist_to_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_dist_to_target: Option<f64>,
    mean_weight_entropy: f64,
    final_grad_norm: f64,
}

fn summarize<'a>(
    name: &'a str,
    cfg: &RunConfigFile,
    out: &EditOutcome,
    src: &LatentTensor,
    target: Option<&LatentTensor>,
) -> EditSummary<'a> {
    EditSummary {
        objective: name,
        steps: out.trace.records.len(),
        seed: cfg.engine.seed,
        final_dist_to_source: out.latent.distance(src).unwrap_or(f64::NAN),
        final_dist_to_target: target.and_then(|t| out.latent.distance(t).ok()),
        initial_dist_to_target: target.and_then(|t| src.distance(t).ok()),
        mean_weight_entropy: out.trace.mean_weight_entropy(),
        final_grad_norm: out.trace.records.last().map_or(0.0, |r| r.grad_norm),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes") + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn save_trace(out: &EditOutcome, dir: &Path, file: &str, gradient_dir: Option<PathBuf>) -> Result<(), CliError> {
    out.trace.save_jsonl(&dir.join(file))?;
    if let Some(g) = gradient_dir {
        // Stale dumps from a longer earlier run would otherwise linger.
        if g.exists() {
            fs::remove_dir_all(&g).map_err(|e| io_err(&g, e))?;
        }
        out.trace.dump_gradients(&g)?;
    }
    Ok(())
}

/// `cds edit`: writes edited.cdst, trace.jsonl, summary.json, config.json and,
/// when requested, gradients/.
pub fn cmd_edit(args: &RunArgs) -> Result<PathBuf, CliError> {
    let session = Session::open(args)?;
    let (src, from_image) = session.load_source(args.source.as_deref())?;
    let cfg = &session.config;
    let options = RunOptions {
        record_gradients: cfg.output.dump_gradients,
    };
    let out = run_edit(&cfg.engine, &session.schedule, session.backend.as_dyn(), &src, &options)?;
    let dir = session.out_dir()?;
    let edited = dir.join("edited.cdst");
    out.latent.write_cdst(&edited).map_err(|e| io_err(&edited, e))?;
    let gradients = cfg.output.dump_gradients.then(|| dir.join("gradients"));
    save_trace(&out, dir, "trace.jsonl", gradients)?;
    let target = session.backend.target_reference(cfg);
    write_json(
        &dir.join("summary.json"),
        &summarize(cfg.engine.objective.name(), cfg, &out, &src, target.as_ref()),
    )?;
    session.write_effective_config()?;
    if let (true, Backend::Remote(r)) = (from_image, &session.backend) {
        let png = r
            .decode_latent(&out.latent)
            .map_err(|e| CliError::backend(format!("stage=decode: {e}")))?;
        let path = dir.join("edited.png");
        fs::write(&path, png).map_err(|e| io_err(&path, e))?;
    }
    Ok(dir.to_path_buf())
}

/// `cds compare`: one run per objective, traces sds/dds/cds.jsonl.
pub fn cmd_compare(args: &RunArgs) -> Result<PathBuf, CliError> {
    let session = Session::open(args)?;
    let (src, _) = session.load_source(args.source.as_deref())?;
    let cfg = &session.config;
    let options = RunOptions {
        record_gradients: cfg.output.dump_gradients,
    };
    let cmp = compare_objectives(&cfg.engine, &session.schedule, session.backend.as_dyn(), &src, &options)?;
    let dir = session.out_dir()?;
    let target = session.backend.target_reference(cfg);
    let mut summaries = Vec::new();
    for (objective, out) in &cmp.runs {
        let name = objective.name();
        let gradients = cfg.output.dump_gradients.then(|| dir.join("gradients").join(name));
        save_trace(out, dir, &format!("{name}.jsonl"), gradients)?;
        let path = dir.join(format!("{name}.cdst"));
        out.latent.write_cdst(&path).map_err(|e| io_err(&path, e))?;
        summaries.push(summarize(name, cfg, out, &src, target.as_ref()));
    }
    write_json(&dir.join("summary.json"), &summaries)?;
    session.write_effective_config()?;
    Ok(dir.to_path_buf())
}

/// Parses a comma-separated list of numbers.
pub fn parse_values(text: &str) -> Result<Vec<f64>, CliError> {
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::config(format!("--values: {s:?} is not a finite number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(CliError::config("--values must list at least one value"));
    }
    Ok(values)
}

fn format_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

/// `cds sweep`: writes sweep.csv. Failed cells get NaN metrics and a stderr line.
pub fn cmd_sweep(args: &RunArgs, axis: SweepAxis, values: &[f64], concurrent: bool) -> Result<PathBuf, CliError> {
    if values.is_empty() {
        return Err(CliError::config("--values must list at least one value"));
    }
    let session = Session::open(args)?;
    let (src, _) = session.load_source(args.source.as_deref())?;
    let cfg = &session.config;
    let target = session.backend.target_reference(cfg);
    let rows = run_sweep(
        &cfg.engine,
        &session.schedule,
        axis,
        values,
        session.backend.as_dyn(),
        &src,
        target.as_ref(),
        concurrent,
    )?;
    let dir = session.out_dir()?;
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record(["axis_value", "dist_to_source", "dist_to_target", "weight_entropy"])
        .map_err(|e| io_err(&path, e))?;
    for r in &rows {
        if let Some(e) = &r.error {
            eprintln!("sweep cell {axis}={} failed: {}", r.axis_value, e.replace('\n', " "));
        }
        w.write_record([
            r.axis_value.to_string(),
            format_metric(r.dist_to_source),
            format_metric(r.dist_to_target),
            format_metric(r.weight_entropy),
        ])
        .map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    session.write_effective_config()?;
    Ok(path)
}

pub const PROBE_CONDITION: &str = "cds-probe";
const PROBE_TIMESTEP: usize = 500;

/// `cds check-backend`: health, probe registration, zero-latent predict.
/// Returns a one-line report on success.
pub fn cmd_check_backend(url_flag: Option<&str>) -> Result<String, CliError> {
    let url = resolve_url(url_flag, None)
        .ok_or_else(|| CliError::config(format!("check-backend needs --backend-url or {BACKEND_URL_ENV}")))?;
    let remote = match RemoteBackend::connect(&url) {
        Ok(r) => r,
        Err(e @ PredictError::VersionMismatch { .. }) => {
            return Err(CliError::backend(format!(
                "stage=health: {e} (protocol version {PROTOCOL_VERSION} required)"
            )))
        }
        Err(e) => return Err(CliError::backend(format!("stage=health: {e}"))),
    };
    match remote.register_condition(PROBE_CONDITION, "a photo", false) {
        Ok(()) | Err(PredictError::AlreadyRegistered(_)) => {}
        Err(e) => return Err(CliError::backend(format!("stage=register: {e}"))),
    }
    let shape = remote.capabilities().shape;
    let zero = LatentTensor::zeros(shape);
    let probe = ConditionRef::new(PROBE_CONDITION).expect("non-empty probe name");
    match predict(&remote, &zero, PROBE_TIMESTEP, &probe, &[]) {
        Ok(eps) if eps.shape() == shape => {}
        Ok(eps) => {
            return Err(CliError::backend(format!(
                "stage=predict: shape mismatch: expected {shape}, got {}",
                eps.shape()
            )))
        }
        Err(e) => return Err(CliError::backend(format!("stage=predict: {e}"))),
    }
    Ok(format!(
        "ok url={url} protocol_version={PROTOCOL_VERSION} latent_shape={shape} model_spec={:?}",
        remote.model_spec()
    ))
}

/// `cds source`: writes the analytic backend's source concept mean as CDST.
pub fn cmd_source(config: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let args = RunArgs {
        config: config.to_path_buf(),
        ..Default::default()
    };
    let session = Session::open(&args)?;
    if !matches!(session.backend, Backend::Analytic(_)) {
        return Err(CliError::config("`source` needs an analytic backend"));
    }
    let (src, _) = session.load_source(None)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    src.write_cdst(out).map_err(|e| io_err(out, e))?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_and_tagged() {
        let e = CliError::backend("first\nsecond");
        assert_eq!(e.to_string(), "error kind=backend code=2: first second");
        assert_eq!(CliError::config("x").exit_code(), 1);
    }

    #[test]
    fn values_parsing() {
        assert_eq!(parse_values("0.01, 0.05,1").unwrap(), vec![0.01, 0.05, 1.0]);
        assert!(parse_values("").is_err());
        assert!(parse_values(" , ").is_err());
        assert!(parse_values("1,abc").is_err());
        assert!(parse_values("nan").is_err());
    }

    #[test]
    fn edit_errors_map_to_exit_codes() {
        let backend = EditError::Backend {
            step: 3,
            t: 10,
            source: PredictError::Transport("down".into()),
        };
        assert_eq!(CliError::from(backend).exit_code(), 2);
        let numeric = EditError::NonFinite {
            step: 1,
            t: 5,
            detail: "inf".into(),
        };
        assert_eq!(CliError::from(numeric).exit_code(), 3);
        assert_eq!(CliError::from(EditError::Config("bad".into())).exit_code(), 1);
    }
}
