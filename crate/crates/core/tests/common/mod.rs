//! Helpers shared by the integration tests: the shipped demo fixture and an
//! in-process mock of the diffusion bridge.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use cds_core::predictor::wire::{self, *};
use cds_core::predictor::{predict, AnalyticModelSpec, GaussianConceptModel, PredictError};
use cds_core::{ConditionRef, EditConfig, LatentTensor, NoiseSchedule, PredictorBackend};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(rel: &str) -> PathBuf {
    repo_root().join("fixtures").join(rel)
}

/// Engine config and analytic model from `fixtures/demo.json`.
pub fn demo() -> (EditConfig, GaussianConceptModel) {
    let text = std::fs::read_to_string(fixture("demo.json")).expect("demo fixture");
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let cfg: EditConfig = serde_json::from_value(doc["engine"].clone()).unwrap();
    let spec: AnalyticModelSpec = serde_json::from_value(doc["backend"]["analytic"].clone()).unwrap();
    let model = GaussianConceptModel::from_spec(&spec, NoiseSchedule::stable_diffusion()).unwrap();
    (cfg, model)
}

pub fn cond(name: &str) -> ConditionRef {
    ConditionRef::new(name).unwrap()
}

pub type Handler = dyn Fn(&str, &str, &str) -> (u16, String) + Send + Sync;

/// A tiny HTTP server answering each request on its own thread through
/// `handler(method, path, body) -> (status, body)`.
pub struct MockBridge {
    server: Arc<tiny_http::Server>,
    pub url: String,
}

impl MockBridge {
    pub fn start(handler: impl Fn(&str, &str, &str) -> (u16, String) + Send + Sync + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind mock bridge"));
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let handler: Arc<Handler> = Arc::new(handler);
        let srv = Arc::clone(&server);
        thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let handler = Arc::clone(&handler);
                thread::spawn(move || {
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let (status, text) = handler(req.method().as_str(), req.url(), &body);
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                    let resp = tiny_http::Response::from_string(text)
                        .with_status_code(status)
                        .with_header(header);
                    let _ = req.respond(resp);
                });
            }
        });
        Self { server, url }
    }

    /// A protocol-conforming bridge serving `model`. Names in `conditions`
    /// count as already registered; newly registered names the model does not
    /// know get a zero offset.
    pub fn analytic(model: GaussianConceptModel, conditions: &[&str]) -> Self {
        let registered: Mutex<BTreeSet<String>> =
            Mutex::new(conditions.iter().map(|s| s.to_string()).collect());
        let model = Mutex::new(model);
        let shape = model.lock().unwrap().shape();
        Self::start(move |method, path, body| match (method, path) {
            ("GET", "/health") => ok(&HealthResponse {
                protocol_version: PROTOCOL_VERSION,
                latent_shape: [shape.channels, shape.height, shape.width],
                model_spec: "analytic-mock".into(),
            }),
            ("POST", "/register_condition") => {
                let r: RegisterConditionRequest = match serde_json::from_str(body) {
                    Ok(r) => r,
                    Err(e) => return error(400, &e.to_string()),
                };
                if r.text.is_empty() {
                    return error(400, "empty text");
                }
                if !registered.lock().unwrap().insert(r.name.clone()) {
                    return error(409, &format!("condition {} already registered", r.name));
                }
                let mut model = model.lock().unwrap();
                let known = model.capabilities().conditions.is_some_and(|c| c.contains(&r.name));
                if !known {
                    model.add_condition(&r.name, LatentTensor::zeros(shape)).unwrap();
                }
                ok(&OkResponse { ok: true })
            }
            ("POST", "/predict") => {
                let r: PredictBody = match serde_json::from_str(body) {
                    Ok(r) => r,
                    Err(e) => return error(400, &e.to_string()),
                };
                let latent = match wire::decode_tensor(&r.latent) {
                    Ok(l) => l,
                    Err(e) => return error(400, &e.to_string()),
                };
                if latent.shape() != shape {
                    return error(422, &format!("latent shape {} != {}", latent.shape(), shape));
                }
                let model = model.lock().unwrap();
                match predict(&*model, &latent, r.timestep, &cond(&r.condition), &r.adapters) {
                    Ok(eps) => ok(&PredictResponse {
                        eps: wire::encode_tensor(&eps),
                    }),
                    Err(PredictError::UnknownAdapter(a)) => error(404, &format!("unknown adapter {a}")),
                    Err(PredictError::UnknownCondition(c)) => error(404, &format!("unknown condition {c}")),
                    Err(e) => error(500, &e.to_string()),
                }
            }
            _ => error(404, "no such route"),
        })
    }
}

impl Drop for MockBridge {
    fn drop(&mut self) {
        self.server.unblock();
    }
}

pub fn ok<T: serde::Serialize>(body: &T) -> (u16, String) {
    (200, serde_json::to_string(body).unwrap())
}

pub fn error(status: u16, message: &str) -> (u16, String) {
    (
        status,
        serde_json::to_string(&ErrorResponse {
            error: message.to_string(),
        })
        .unwrap(),
    )
}
