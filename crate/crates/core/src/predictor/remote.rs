//! HTTP/JSON client for the diffusion-model bridge.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, *};
use super::{Capabilities, PredictError, PredictRequest, PredictorBackend};
use crate::tensor::{LatentTensor, Shape};

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub timeout: Duration,
    /// Extra attempts after a timed-out request.
    pub timeout_retries: u32,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            timeout_retries: 1,
        }
    }
}

/// A bridge session that has passed the `/health` handshake.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    base_url: String,
    agent: ureq::Agent,
    options: RemoteOptions,
    shape: Shape,
    model_spec: String,
}

impl RemoteBackend {
    pub fn connect(url: &str) -> Result<Self, PredictError> {
        Self::connect_with(url, RemoteOptions::default())
    }

    pub fn connect_with(url: &str, options: RemoteOptions) -> Result<Self, PredictError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(options.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut backend = Self {
            base_url: url.trim_end_matches('/').to_string(),
            agent,
            options,
            shape: Shape::new(1, 1, 1)?,
            model_spec: String::new(),
        };
        let health = backend.health()?;
        if health.protocol_version != PROTOCOL_VERSION {
            return Err(PredictError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                found: health.protocol_version,
            });
        }
        let [c, h, w] = health.latent_shape;
        backend.shape = Shape::new(c, h, w)
            .map_err(|e| PredictError::Protocol(format!("bad latent_shape: {e}")))?;
        backend.model_spec = health.model_spec;
        Ok(backend)
    }

    pub fn url(&self) -> &str {
        &self.base_url
    }

    pub fn model_spec(&self) -> &str {
        &self.model_spec
    }

    pub fn health(&self) -> Result<HealthResponse, PredictError> {
        self.call::<(), _>("GET", "/health", None)
    }

    /// Registers a text condition under `name`. A duplicate name yields
    /// [`PredictError::AlreadyRegistered`].
    pub fn register_condition(
        &self,
        name: &str,
        text: &str,
        negative: bool,
    ) -> Result<(), PredictError> {
        let body = RegisterConditionRequest {
            name: name.to_string(),
            text: text.to_string(),
            negative,
        };
        match self.call::<_, OkResponse>("POST", "/register_condition", Some(&body)) {
            Err(PredictError::Server { status: 409, .. }) => {
                Err(PredictError::AlreadyRegistered(name.to_string()))
            }
            other => other.map(|_| ()),
        }
    }

    /// Encodes an image (PNG bytes) to a latent through the bridge VAE.
    pub fn encode_image(&self, png: &[u8]) -> Result<LatentTensor, PredictError> {
        let body = EncodeRequest {
            image: wire::encode_bytes(png),
        };
        let resp: EncodeResponse = self.call("POST", "/encode", Some(&body))?;
        decode_wire_tensor(&resp.latent)
    }

    /// Decodes a latent to PNG bytes through the bridge VAE.
    pub fn decode_latent(&self, latent: &LatentTensor) -> Result<Vec<u8>, PredictError> {
        let body = DecodeRequest {
            latent: wire::encode_tensor(latent),
        };
        let resp: DecodeResponse = self.call("POST", "/decode", Some(&body))?;
        wire::decode_bytes(&resp.image).map_err(|e| PredictError::Protocol(e.to_string()))
    }

    fn call<B: Serialize, R: DeserializeOwned>(
        &self,
        method: &str,
        path: &str,
        body: Option<&B>,
    ) -> Result<R, PredictError> {
        let url = format!("{}{}", self.base_url, path);
        let mut attempt = 0;
        loop {
            let result = match (method, body) {
                ("GET", _) => self.agent.get(&url).call(),
                (_, Some(b)) => self.agent.post(&url).send_json(b),
                (_, None) => self.agent.post(&url).send_empty(),
            };
            match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| PredictError::Transport(format!("{path}: {e}")))?;
                    if status == 503 {
                        return Err(PredictError::NotReady(server_message(&text)));
                    }
                    if !(200..300).contains(&status) {
                        return Err(PredictError::Server {
                            status,
                            message: server_message(&text),
                        });
                    }
                    return serde_json::from_str(&text).map_err(|e| {
                        PredictError::Protocol(format!("{path}: malformed response: {e}"))
                    });
                }
                Err(ureq::Error::Timeout(t)) => {
                    if attempt < self.options.timeout_retries {
                        attempt += 1;
                        continue;
                    }
                    return Err(PredictError::Timeout(format!("{path}: {t}")));
                }
                Err(e) => return Err(PredictError::Transport(format!("{path}: {e}"))),
            }
        }
    }
}

fn server_message(text: &str) -> String {
    serde_json::from_str::<ErrorResponse>(text)
        .map(|e| e.error)
        .unwrap_or_else(|_| text.trim().to_string())
}

fn decode_wire_tensor(s: &str) -> Result<LatentTensor, PredictError> {
    wire::decode_tensor(s).map_err(|e| PredictError::Protocol(format!("bad tensor payload: {e}")))
}

impl PredictorBackend for RemoteBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            shape: self.shape,
            conditions: None,
            adapters: None,
        }
    }

    fn predict_raw(&self, r: &PredictRequest<'_>) -> Result<LatentTensor, PredictError> {
        let body = PredictBody {
            condition: r.condition.to_string(),
            timestep: r.timestep,
            adapters: r.adapters.to_vec(),
            latent: wire::encode_tensor(r.latent),
        };
        let resp: PredictResponse = match self.call("POST", "/predict", Some(&body)) {
            Err(PredictError::Server { status: 404, message }) => {
                return Err(if message.contains("adapter") {
                    PredictError::UnknownAdapter(message)
                } else {
                    PredictError::UnknownCondition(message)
                })
            }
            Err(PredictError::Server { status: 422, message }) => {
                return Err(PredictError::Protocol(format!("shape rejected by bridge: {message}")))
            }
            other => other?,
        };
        decode_wire_tensor(&resp.eps)
    }
}
