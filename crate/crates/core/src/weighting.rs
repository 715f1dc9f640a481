//! Dynamic concept weighting.
//!
//! Each adapter's noise prediction is compared patch by patch with the base
//! model's prediction. Patches where an adapter barely differs from the base
//! carry little of its concept, so weights come from a SoftMin over the cosine
//! similarities: the least similar adapter at a patch dominates it. Patch
//! weights are upsampled nearest-neighbour to the latent grid and used to
//! blend the adapter predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{predict, predict_many, PredictError, PredictRequest, PredictorBackend};
use crate::tensor::{AdapterSpec, ConditionRef, LatentTensor, Shape, TensorError};

/// Norm below which a patch vector counts as zero.
pub const ZERO_NORM: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightingError {
    #[error("{shape} latent is not divisible into {patch} patches")]
    NotDivisible { shape: Shape, patch: PatchSize },
    #[error("patch geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("at least one adapter is required")]
    NoAdapters,
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSize {
    pub height: usize,
    pub width: usize,
}

impl PatchSize {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn square(n: usize) -> Self {
        Self::new(n, n)
    }
}

impl Default for PatchSize {
    fn default() -> Self {
        Self::square(2)
    }
}

impl std::fmt::Display for PatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Patch vectors of a tensor. Patch `p` is row-major over the patch grid and
/// its vector lists the block's values in (channel, row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    shape: Shape,
    patch: PatchSize,
    vectors: Vec<f32>,
}

impl PatchGrid {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn patch(&self) -> PatchSize {
        self.patch
    }

    pub fn rows(&self) -> usize {
        self.shape.height / self.patch.height
    }

    pub fn cols(&self) -> usize {
        self.shape.width / self.patch.width
    }

    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn vector_len(&self) -> usize {
        self.shape.channels * self.patch.height * self.patch.width
    }

    pub fn vector(&self, p: usize) -> &[f32] {
        let n = self.vector_len();
        &self.vectors[p * n..(p + 1) * n]
    }

    /// Inverse of [`partition_patches`].
    pub fn unflatten(&self) -> LatentTensor {
        let mut data = vec![0.0f32; self.shape.len()];
        for_each_patch_cell(self.shape, self.patch, |p, k, flat| {
            data[flat] = self.vectors[p * self.vector_len() + k];
        });
        LatentTensor::new(self.shape, data).expect("patch values come from a finite tensor")
    }
}

/// Visits every element as (patch index, offset within patch vector, flat tensor index).
fn for_each_patch_cell(shape: Shape, patch: PatchSize, mut f: impl FnMut(usize, usize, usize)) {
    let cols = shape.width / patch.width;
    let rows = shape.height / patch.height;
    for pr in 0..rows {
        for pc in 0..cols {
            let p = pr * cols + pc;
            let mut k = 0;
            for c in 0..shape.channels {
                for dh in 0..patch.height {
                    for dw in 0..patch.width {
                        f(p, k, shape.index(c, pr * patch.height + dh, pc * patch.width + dw));
                        k += 1;
                    }
                }
            }
        }
    }
}

fn check_divisible(shape: Shape, patch: PatchSize) -> Result<(), WeightingError> {
    if patch.height == 0
        || patch.width == 0
        || !shape.height.is_multiple_of(patch.height)
        || !shape.width.is_multiple_of(patch.width)
    {
        return Err(WeightingError::NotDivisible { shape, patch });
    }
    Ok(())
}

pub fn partition_patches(eps: &LatentTensor, patch: PatchSize) -> Result<PatchGrid, WeightingError> {
    let shape = eps.shape();
    check_divisible(shape, patch)?;
    let mut vectors = vec![0.0f32; shape.len()];
    let src = eps.as_slice();
    let len = shape.channels * patch.height * patch.width;
    for_each_patch_cell(shape, patch, |p, k, flat| vectors[p * len + k] = src[flat]);
    Ok(PatchGrid {
        shape,
        patch,
        vectors,
    })
}

/// Cosine similarity of two vectors with the zero-norm convention: both
/// near-zero gives 1, exactly one near-zero gives 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    match (na < ZERO_NORM, nb < ZERO_NORM) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

pub fn patch_cosine(base: &PatchGrid, other: &PatchGrid) -> Result<Vec<f64>, WeightingError> {
    if base.shape != other.shape || base.patch != other.patch {
        return Err(WeightingError::GeometryMismatch(format!(
            "{} / {} vs {} / {}",
            base.shape, base.patch, other.shape, other.patch
        )));
    }
    Ok((0..base.count())
        .map(|p| cosine(base.vector(p), other.vector(p)))
        .collect())
}

/// Row-major `N x P` matrix: one row per adapter, one column per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMatrix {
    adapters: usize,
    patches: usize,
    values: Vec<f64>,
}

/// Cosine similarities `S[i, p]`.
pub type SimilarityMatrix = ConceptMatrix;
/// SoftMin weights `w[i, p]`; each column sums to one.
pub type PatchWeights = ConceptMatrix;

impl ConceptMatrix {
    pub fn new(adapters: usize, patches: usize, values: Vec<f64>) -> Result<Self, WeightingError> {
        if adapters == 0 {
            return Err(WeightingError::NoAdapters);
        }
        if patches == 0 || values.len() != adapters * patches {
            return Err(WeightingError::GeometryMismatch(format!(
                "{} values for {adapters} x {patches}",
                values.len()
            )));
        }
        Ok(Self {
            adapters,
            patches,
            values,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, WeightingError> {
        let adapters = rows.len();
        let patches = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != patches) {
            return Err(WeightingError::GeometryMismatch("ragged rows".into()));
        }
        Self::new(adapters, patches, rows.into_iter().flatten().collect())
    }

    pub fn adapters(&self) -> usize {
        self.adapters
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn get(&self, adapter: usize, patch: usize) -> f64 {
        self.values[adapter * self.patches + patch]
    }

    pub fn row(&self, adapter: usize) -> &[f64] {
        &self.values[adapter * self.patches..(adapter + 1) * self.patches]
    }

    pub fn column(&self, patch: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.adapters).map(move |i| self.get(i, patch))
    }

    /// Mean over patches of the Shannon entropy (nats) of each weight column.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = (0..self.patches)
            .map(|p| {
                self.column(p)
                    .filter(|&w| w > 0.0)
                    .map(|w| -w * w.ln())
                    .sum::<f64>()
            })
            .sum();
        total / self.patches as f64
    }
}

/// `w[i, p] = exp(-S[i, p] / tau) / sum_j exp(-S[j, p] / tau)`, with the
/// per-patch maximum of `-S / tau` subtracted before exponentiating.
pub fn softmin_weights(sim: &SimilarityMatrix, tau: f64) -> Result<PatchWeights, WeightingError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(WeightingError::InvalidTemperature(tau));
    }
    let (n, p_count) = (sim.adapters, sim.patches);
    let mut values = vec![0.0f64; n * p_count];
    let mut logits = vec![0.0f64; n];
    for p in 0..p_count {
        for (i, l) in logits.iter_mut().enumerate() {
            *l = -sim.get(i, p) / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (i, l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            values[i * p_count + p] = e;
            total += e;
        }
        for i in 0..n {
            values[i * p_count + p] /= total;
        }
    }
    ConceptMatrix::new(n, p_count, values)
}

/// Per-adapter spatial weight fields (`H x W` each), constant on every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    adapters: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl WeightMap {
    pub fn adapters(&self) -> usize {
        self.adapters
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, adapter: usize, h: usize, w: usize) -> f64 {
        self.values[(adapter * self.height + h) * self.width + w]
    }

    pub fn field(&self, adapter: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.values[adapter * plane..(adapter + 1) * plane]
    }
}

pub fn upsample_weights(
    weights: &PatchWeights,
    patch: PatchSize,
    height: usize,
    width: usize,
) -> Result<WeightMap, WeightingError> {
    if patch.height == 0 || patch.width == 0 || !height.is_multiple_of(patch.height) || !width.is_multiple_of(patch.width) {
        return Err(WeightingError::GeometryMismatch(format!(
            "{height}x{width} grid is not divisible into {patch} patches"
        )));
    }
    let cols = width / patch.width;
    let expected = (height / patch.height) * cols;
    if weights.patches != expected {
        return Err(WeightingError::GeometryMismatch(format!(
            "{} patch weights for a grid of {expected} patches",
            weights.patches
        )));
    }
    let plane = height * width;
    let mut values = vec![0.0f64; weights.adapters * plane];
    for i in 0..weights.adapters {
        for h in 0..height {
            for w in 0..width {
                let p = (h / patch.height) * cols + w / patch.width;
                values[i * plane + h * width + w] = weights.get(i, p);
            }
        }
    }
    Ok(WeightMap {
        adapters: weights.adapters,
        height,
        width,
        values,
    })
}

/// `sum_i W_i (.) preds_i`, each spatial field broadcast over channels.
pub fn composite_prediction(
    preds: &[LatentTensor],
    weights: &WeightMap,
) -> Result<LatentTensor, WeightingError> {
    let first = preds.first().ok_or(WeightingError::NoAdapters)?;
    let shape = first.shape();
    for p in preds {
        first.ensure_same_shape(p)?;
    }
    if weights.adapters != preds.len() || weights.height != shape.height || weights.width != shape.width {
        return Err(WeightingError::GeometryMismatch(format!(
            "weight map {}x{}x{} for {} predictions of shape {shape}",
            weights.adapters,
            weights.height,
            weights.width,
            preds.len()
        )));
    }
    let plane = shape.plane();
    let mut acc = vec![0.0f64; shape.len()];
    for (i, pred) in preds.iter().enumerate() {
        let field = weights.field(i);
        for (k, (a, &v)) in acc.iter_mut().zip(pred.as_slice()).enumerate() {
            *a += field[k % plane] * f64::from(v);
        }
    }
    Ok(LatentTensor::new(shape, acc.into_iter().map(|v| v as f32).collect())?)
}

/// Output of [`dynamic_weighted_predict`].
#[derive(Debug, Clone)]
pub struct ConceptPrediction {
    pub eps: LatentTensor,
    pub weights: PatchWeights,
    /// Absent when a single adapter makes the comparison unnecessary.
    pub similarities: Option<SimilarityMatrix>,
}

/// Full weighting pipeline for one timestep: base and adapter predictions,
/// patch similarities, SoftMin, upsampling and composition.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_weighted_predict(
    backend: &dyn PredictorBackend,
    adapters: &[AdapterSpec],
    latent: &LatentTensor,
    timestep: usize,
    condition: &ConditionRef,
    patch: PatchSize,
    tau: f64,
    parallel: bool,
) -> Result<ConceptPrediction, WeightingError> {
    if adapters.is_empty() {
        return Err(WeightingError::NoAdapters);
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(WeightingError::InvalidTemperature(tau));
    }
    check_divisible(latent.shape(), patch)?;
    if adapters.len() == 1 {
        let eps = predict(backend, latent, timestep, condition, adapters)?;
        let patches = (latent.shape().height / patch.height) * (latent.shape().width / patch.width);
        return Ok(ConceptPrediction {
            eps,
            weights: ConceptMatrix::new(1, patches, vec![1.0; patches])?,
            similarities: None,
        });
    }

    let mut requests = vec![PredictRequest {
        latent,
        timestep,
        condition,
        adapters: &[],
    }];
    requests.extend(adapters.iter().map(|a| PredictRequest {
        latent,
        timestep,
        condition,
        adapters: std::slice::from_ref(a),
    }));
    let mut preds = predict_many(backend, &requests, parallel)?;
    let base = partition_patches(&preds.remove(0), patch)?;

    let mut rows = Vec::with_capacity(adapters.len());
    for pred in &preds {
        rows.push(patch_cosine(&base, &partition_patches(pred, patch)?)?);
    }
    let similarities = ConceptMatrix::from_rows(rows)?;
    let weights = softmin_weights(&similarities, tau)?;
    let shape = latent.shape();
    let map = upsample_weights(&weights, patch, shape.height, shape.width)?;
    let eps = composite_prediction(&preds, &map)?;
    Ok(ConceptPrediction {
        eps,
        weights,
        similarities: Some(similarities),
    })
}
