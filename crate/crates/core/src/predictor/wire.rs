//! JSON bodies of the bridge protocol. Tensors travel as base64-encoded CDST.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::tensor::{AdapterSpec, LatentTensor, TensorError};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub protocol_version: u32,
    pub latent_shape: [usize; 3],
    #[serde(default)]
    pub model_spec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterConditionRequest {
    pub name: String,
    pub text: String,
    #[serde(default)]
    pub negative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OkResponse {
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictBody {
    pub condition: String,
    pub timestep: usize,
    pub adapters: Vec<AdapterSpec>,
    pub latent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub eps: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub latent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub latent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub image: String,
}

/// Body of every non-2xx bridge response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum WireError {
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn encode_tensor(t: &LatentTensor) -> String {
    STANDARD.encode(t.to_cdst_bytes())
}

pub fn decode_tensor(s: &str) -> Result<LatentTensor, WireError> {
    let bytes = decode_bytes(s)?;
    Ok(LatentTensor::from_cdst_bytes(&bytes)?)
}

pub fn encode_bytes(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_bytes(s: &str) -> Result<Vec<u8>, WireError> {
    STANDARD
        .decode(s.trim())
        .map_err(|e| WireError::Base64(e.to_string()))
}
