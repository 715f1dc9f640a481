//! Python bindings: tensors, schedules, backends, gradients and the edit loop.

use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use cds_core::distill::{self, GradConfig};
use cds_core::predictor::{self, AnalyticModelSpec, GaussianConceptModel};
use cds_core::weighting::{self, SimilarityMatrix};
use cds_core::{
    AdapterSpec, BetaSchedule, ConditionRef, EditConfig, NoiseSchedule, PredictorBackend, RegularizerMode,
    RemoteBackend, RemoteOptions, RunOptions, Shape, SweepAxis, TimestepPlan,
};

create_exception!(cdsedit, CdsError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    CdsError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cond(name: &str) -> PyResult<ConditionRef> {
    ConditionRef::new(name).map_err(value_err)
}

fn adapters(list: Option<Vec<(String, f64)>>) -> PyResult<Vec<AdapterSpec>> {
    list.unwrap_or_default()
        .into_iter()
        .map(|(id, scale)| AdapterSpec::new(id, scale).map_err(value_err))
        .collect()
}

/// Accepts a JSON string or any object `json.dumps` can serialize.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.extract::<String>() {
        return Ok(s);
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Dense C x H x W float32 tensor.
#[pyclass(frozen, skip_from_py_object, name = "LatentTensor", module = "cdsedit")]
#[derive(Clone)]
pub struct PyTensor(cds_core::LatentTensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: (usize, usize, usize), values: Vec<f32>) -> PyResult<Self> {
        let shape = Shape::new(shape.0, shape.1, shape.2).map_err(value_err)?;
        cds_core::LatentTensor::new(shape, values).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize)) -> PyResult<Self> {
        let shape = Shape::new(shape.0, shape.1, shape.2).map_err(value_err)?;
        Ok(Self(cds_core::LatentTensor::zeros(shape)))
    }

    /// Decodes CDST bytes.
    #[staticmethod]
    fn from_cdst(data: &[u8]) -> PyResult<Self> {
        cds_core::LatentTensor::from_cdst_bytes(data).map(Self).map_err(err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        cds_core::LatentTensor::read_cdst(path).map(Self).map_err(err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.0.write_cdst(path).map_err(err)
    }

    fn to_cdst<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_cdst_bytes())
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s.channels, s.height, s.width)
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.0.as_slice().to_vec()
    }

    fn get(&self, c: usize, h: usize, w: usize) -> PyResult<f32> {
        let s = self.0.shape();
        if c >= s.channels || h >= s.height || w >= s.width {
            return Err(value_err(format!("index ({c}, {h}, {w}) outside {s}")));
        }
        Ok(self.0.get(c, h, w))
    }

    fn norm(&self) -> f64 {
        self.0.norm()
    }

    fn distance(&self, other: PyRef<'_, PyTensor>) -> PyResult<f64> {
        self.0.distance(&other.0).map_err(value_err)
    }

    fn __add__(&self, other: PyRef<'_, PyTensor>) -> PyResult<Self> {
        self.0.add(&other.0).map(Self).map_err(value_err)
    }

    fn __sub__(&self, other: PyRef<'_, PyTensor>) -> PyResult<Self> {
        self.0.sub(&other.0).map(Self).map_err(value_err)
    }

    fn __mul__(&self, factor: f32) -> PyResult<Self> {
        self.0.scale(factor).map(Self).map_err(value_err)
    }

    fn __eq__(&self, other: PyRef<'_, PyTensor>) -> bool {
        self.0 == other.0
    }

    fn __len__(&self) -> usize {
        self.0.as_slice().len()
    }

    fn __repr__(&self) -> String {
        format!("LatentTensor({}, norm={:.6})", self.0.shape(), self.0.norm())
    }
}

#[pyclass(frozen, skip_from_py_object, name = "NoiseSchedule", module = "cdsedit")]
#[derive(Clone)]
pub struct PySchedule(NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (kind = "scaled_linear", num_steps = 1000, beta_start = 0.00085, beta_end = 0.012))]
    fn new(kind: &str, num_steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let kind = match kind {
            "linear" => BetaSchedule::Linear,
            "scaled_linear" => BetaSchedule::ScaledLinear,
            other => return Err(value_err(format!("unknown schedule kind {other:?}"))),
        };
        NoiseSchedule::new(kind, num_steps, beta_start, beta_end)
            .map(Self)
            .map_err(value_err)
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.0.num_steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.0.alpha_bar(t).map_err(value_err)
    }

    fn alpha_bars(&self) -> Vec<f64> {
        self.0.alpha_bars().to_vec()
    }

    fn add_noise(&self, x0: PyRef<'_, PyTensor>, eps: PyRef<'_, PyTensor>, t: usize) -> PyResult<PyTensor> {
        self.0.add_noise(&x0.0, &eps.0, t).map(PyTensor).map_err(value_err)
    }
}

/// Strictly descending timesteps from `t_max` to `t_min`.
#[pyfunction]
fn plan_timesteps(steps: usize, t_max: usize, t_min: usize) -> PyResult<Vec<usize>> {
    TimestepPlan::linear(steps, t_max, t_min)
        .map(|p| p.steps().to_vec())
        .map_err(value_err)
}

enum Inner {
    Analytic(GaussianConceptModel),
    Remote(RemoteBackend),
}

/// A noise predictor: the closed-form Gaussian model or a remote bridge.
#[pyclass(frozen, name = "Backend", module = "cdsedit")]
pub struct PyBackend(Inner);

impl PyBackend {
    fn as_dyn(&self) -> &dyn PredictorBackend {
        match &self.0 {
            Inner::Analytic(m) => m,
            Inner::Remote(r) => r,
        }
    }

    fn analytic_model(&self) -> PyResult<&GaussianConceptModel> {
        match &self.0 {
            Inner::Analytic(m) => Ok(m),
            Inner::Remote(_) => Err(value_err("only available on an analytic backend")),
        }
    }

    fn remote_client(&self) -> PyResult<&RemoteBackend> {
        match &self.0 {
            Inner::Remote(r) => Ok(r),
            Inner::Analytic(_) => Err(value_err("only available on a remote backend")),
        }
    }
}

#[pymethods]
impl PyBackend {
    /// Builds the analytic model from a spec (JSON string or dict).
    #[staticmethod]
    #[pyo3(signature = (spec, schedule = None))]
    fn analytic(spec: &Bound<'_, PyAny>, schedule: Option<PyRef<'_, PySchedule>>) -> PyResult<Self> {
        let spec: AnalyticModelSpec = serde_json::from_str(&json_text(spec)?).map_err(value_err)?;
        let schedule = schedule.map_or_else(NoiseSchedule::stable_diffusion, |s| s.0.clone());
        GaussianConceptModel::from_spec(&spec, schedule)
            .map(|m| Self(Inner::Analytic(m)))
            .map_err(value_err)
    }

    /// Connects to a bridge; performs the `/health` handshake.
    #[staticmethod]
    #[pyo3(signature = (url, timeout = 120.0))]
    fn remote(py: Python<'_>, url: &str, timeout: f64) -> PyResult<Self> {
        let options = RemoteOptions {
            timeout: Duration::from_secs_f64(timeout),
            ..RemoteOptions::default()
        };
        py.detach(|| RemoteBackend::connect_with(url, options))
            .map(|r| Self(Inner::Remote(r)))
            .map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.as_dyn().capabilities().shape;
        (s.channels, s.height, s.width)
    }

    #[pyo3(signature = (latent, t, condition, adapters = None))]
    fn predict(
        &self,
        py: Python<'_>,
        latent: PyRef<'_, PyTensor>,
        t: usize,
        condition: &str,
        adapters: Option<Vec<(String, f64)>>,
    ) -> PyResult<PyTensor> {
        let (c, a) = (cond(condition)?, self::adapters(adapters)?);
        let latent = latent.0.clone();
        py.detach(|| predictor::predict(self.as_dyn(), &latent, t, &c, &a))
            .map(PyTensor)
            .map_err(err)
    }

    /// `(1 + lambda) * eps(positive) - lambda * eps(negative)`.
    #[pyo3(signature = (latent, t, positive, negative, guidance, adapters = None))]
    #[allow(clippy::too_many_arguments)]
    fn guided_predict(
        &self,
        py: Python<'_>,
        latent: PyRef<'_, PyTensor>,
        t: usize,
        positive: &str,
        negative: &str,
        guidance: f64,
        adapters: Option<Vec<(String, f64)>>,
    ) -> PyResult<PyTensor> {
        let (p, n, a) = (cond(positive)?, cond(negative)?, self::adapters(adapters)?);
        let latent = latent.0.clone();
        py.detach(|| predictor::guided_predict(self.as_dyn(), &latent, t, &p, &n, guidance, &a, &[]))
            .map(PyTensor)
            .map_err(err)
    }

    /// Analytic only: the concept mean for a condition and adapter set.
    #[pyo3(signature = (condition, adapters = None))]
    fn concept_mean(&self, condition: &str, adapters: Option<Vec<(String, f64)>>) -> PyResult<PyTensor> {
        self.analytic_model()?
            .concept_mean(&cond(condition)?, &self::adapters(adapters)?)
            .map(PyTensor)
            .map_err(err)
    }

    /// Remote only. Returns False when the name was already registered.
    #[pyo3(signature = (name, text, negative = false))]
    fn register_condition(&self, py: Python<'_>, name: &str, text: &str, negative: bool) -> PyResult<bool> {
        let remote = self.remote_client()?;
        match py.detach(|| remote.register_condition(name, text, negative)) {
            Ok(()) => Ok(true),
            Err(predictor::PredictError::AlreadyRegistered(_)) => Ok(false),
            Err(e) => Err(err(e)),
        }
    }
}

/// Per-patch SoftMin weights; `similarities` is one row per adapter.
#[pyfunction]
fn softmin_weights(similarities: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let sim = SimilarityMatrix::from_rows(similarities).map_err(value_err)?;
    let w = weighting::softmin_weights(&sim, tau).map_err(value_err)?;
    Ok((0..w.adapters()).map(|i| w.row(i).to_vec()).collect())
}

#[pyfunction]
fn cosine(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(value_err("vectors differ in length"));
    }
    Ok(weighting::cosine(&a, &b))
}

#[pyfunction]
#[pyo3(signature = (eps_tgt, eps_src, w_t = 1.0))]
fn dds_grad(eps_tgt: PyRef<'_, PyTensor>, eps_src: PyRef<'_, PyTensor>, w_t: f64) -> PyResult<PyTensor> {
    distill::dds_grad(&eps_tgt.0, &eps_src.0, w_t)
        .map(|g| PyTensor(g.grad))
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (eps_tgt, eps_src, x0_tgt, x0_src, eta = 0.5, mode = "l2_signed", w_t = 1.0))]
fn cds_grad(
    eps_tgt: PyRef<'_, PyTensor>,
    eps_src: PyRef<'_, PyTensor>,
    x0_tgt: PyRef<'_, PyTensor>,
    x0_src: PyRef<'_, PyTensor>,
    eta: f64,
    mode: &str,
    w_t: f64,
) -> PyResult<PyTensor> {
    let regularizer_mode: RegularizerMode =
        serde_json::from_value(serde_json::Value::String(mode.into())).map_err(|_| value_err(format!("unknown mode {mode:?}")))?;
    let cfg = GradConfig {
        eta,
        regularizer_mode,
        ..GradConfig::default()
    };
    distill::cds_grad(&eps_tgt.0, &eps_src.0, &x0_tgt.0, &x0_src.0, &cfg, w_t)
        .map(|g| PyTensor(g.grad))
        .map_err(value_err)
}

fn edit_config(config: Option<&Bound<'_, PyAny>>) -> PyResult<EditConfig> {
    match config {
        None => Ok(EditConfig::default()),
        Some(c) => serde_json::from_str(&json_text(c)?).map_err(value_err),
    }
}

/// Runs the edit loop. Returns `(latent, trace, gradients)` where `trace` is a
/// list of per-step dicts and `gradients` is empty unless requested.
#[pyfunction]
#[pyo3(signature = (backend, source, config = None, record_gradients = false))]
fn run_edit<'py>(
    py: Python<'py>,
    backend: PyRef<'_, PyBackend>,
    source: PyRef<'_, PyTensor>,
    config: Option<&Bound<'py, PyAny>>,
    record_gradients: bool,
) -> PyResult<(PyTensor, Bound<'py, PyAny>, Vec<PyTensor>)> {
    let cfg = edit_config(config)?;
    let schedule = schedule_for(&backend);
    let src = source.0.clone();
    let b: &PyBackend = &backend;
    let out = py
        .detach(|| cds_core::run_edit(&cfg, &schedule, b.as_dyn(), &src, &RunOptions { record_gradients }))
        .map_err(err)?;
    let trace = from_json(py, &serde_json::to_string(&out.trace.records).map_err(err)?)?;
    let grads = out.trace.gradients.into_iter().map(PyTensor).collect();
    Ok((PyTensor(out.latent), trace, grads))
}

/// One edit per value along `axis` (eta, tau, patch or lr); returns row dicts.
#[pyfunction]
#[pyo3(signature = (backend, source, axis, values, config = None, target = None, concurrent = false))]
#[allow(clippy::too_many_arguments)]
fn run_sweep<'py>(
    py: Python<'py>,
    backend: PyRef<'_, PyBackend>,
    source: PyRef<'_, PyTensor>,
    axis: &str,
    values: Vec<f64>,
    config: Option<&Bound<'py, PyAny>>,
    target: Option<PyRef<'_, PyTensor>>,
    concurrent: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = edit_config(config)?;
    let axis: SweepAxis = axis.parse().map_err(value_err)?;
    let schedule = schedule_for(&backend);
    let src = source.0.clone();
    let target = target.map(|t| t.0.clone());
    let b: &PyBackend = &backend;
    let rows = py
        .detach(|| cds_core::run_sweep(&cfg, &schedule, axis, &values, b.as_dyn(), &src, target.as_ref(), concurrent))
        .map_err(err)?;
    from_json(py, &serde_json::to_string(&rows).map_err(err)?)
}

fn schedule_for(backend: &PyBackend) -> NoiseSchedule {
    match &backend.0 {
        Inner::Analytic(m) => m.schedule().clone(),
        Inner::Remote(_) => NoiseSchedule::stable_diffusion(),
    }
}

#[pymodule]
fn cdsedit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CdsError", m.py().get_type::<CdsError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyBackend>()?;
    m.add_function(wrap_pyfunction!(plan_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(softmin_weights, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(dds_grad, m)?)?;
    m.add_function(wrap_pyfunction!(cds_grad, m)?)?;
    m.add_function(wrap_pyfunction!(run_edit, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
