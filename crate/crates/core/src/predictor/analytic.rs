//! Closed-form noise predictor for a Gaussian data model.
//!
//! Data under condition `c` with adapters `A` is `x0 ~ N(mu(c, A), var * I)`
//! where `mu(c, A) = base + offset(c) + sum_i scale_i * delta_i` and each
//! `delta_i` is supported on a spatial mask `R_i`. With
//! `z_t = sqrt(ab) * x0 + sqrt(1 - ab) * eps`, the posterior-mean noise is
//!
//! ```text
//! eps_hat = sqrt(1 - ab) * (z_t - sqrt(ab) * mu) / (ab * var + 1 - ab)
//! ```
//!
//! which equals `-sqrt(1 - ab)` times the score of the marginal of `z_t`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Capabilities, PredictError, PredictRequest, PredictorBackend};
use crate::schedule::NoiseSchedule;
use crate::tensor::{AdapterSpec, ConditionRef, LatentTensor, Shape};

/// An adapter's mean offset and the spatial mask (`H x W`) it lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptAdapter {
    offset: LatentTensor,
    mask: Vec<bool>,
}

impl ConceptAdapter {
    pub fn offset(&self) -> &LatentTensor {
        &self.offset
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

#[derive(Debug, Clone)]
pub struct GaussianConceptModel {
    schedule: NoiseSchedule,
    variance: f64,
    base_mean: LatentTensor,
    conditions: BTreeMap<String, LatentTensor>,
    adapters: BTreeMap<String, ConceptAdapter>,
}

impl GaussianConceptModel {
    pub fn new(
        schedule: NoiseSchedule,
        base_mean: LatentTensor,
        variance: f64,
    ) -> Result<Self, PredictError> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(PredictError::InvalidModel(format!(
                "variance must be positive, got {variance}"
            )));
        }
        Ok(Self {
            schedule,
            variance,
            base_mean,
            conditions: BTreeMap::new(),
            adapters: BTreeMap::new(),
        })
    }

    pub fn shape(&self) -> Shape {
        self.base_mean.shape()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn add_condition(
        &mut self,
        name: impl Into<String>,
        offset: LatentTensor,
    ) -> Result<(), PredictError> {
        let name = name.into();
        self.base_mean.ensure_same_shape(&offset)?;
        if name.is_empty() {
            return Err(PredictError::InvalidModel("empty condition name".into()));
        }
        self.conditions.insert(name, offset);
        Ok(())
    }

    /// Registers an adapter. `offset` must vanish outside `mask`.
    pub fn add_adapter(
        &mut self,
        id: impl Into<String>,
        mask: Vec<bool>,
        offset: LatentTensor,
    ) -> Result<(), PredictError> {
        let id = id.into();
        let shape = self.shape();
        self.base_mean.ensure_same_shape(&offset)?;
        if mask.len() != shape.plane() {
            return Err(PredictError::InvalidModel(format!(
                "adapter '{id}' mask has {} cells, expected {}",
                mask.len(),
                shape.plane()
            )));
        }
        let plane = shape.plane();
        if let Some(i) = offset
            .as_slice()
            .iter()
            .enumerate()
            .position(|(i, v)| *v != 0.0 && !mask[i % plane])
        {
            return Err(PredictError::InvalidModel(format!(
                "adapter '{id}' offset is nonzero outside its mask at flat index {i}"
            )));
        }
        self.adapters.insert(id, ConceptAdapter { offset, mask });
        Ok(())
    }

    pub fn adapter(&self, id: &str) -> Option<&ConceptAdapter> {
        self.adapters.get(id)
    }

    /// `mu(condition, adapters)`.
    pub fn concept_mean(
        &self,
        condition: &ConditionRef,
        adapters: &[AdapterSpec],
    ) -> Result<LatentTensor, PredictError> {
        let cond = self
            .conditions
            .get(condition.as_str())
            .ok_or_else(|| PredictError::UnknownCondition(condition.to_string()))?;
        let mut mean: Vec<f64> = self
            .base_mean
            .as_slice()
            .iter()
            .zip(cond.as_slice())
            .map(|(&b, &c)| f64::from(b) + f64::from(c))
            .collect();
        let plane = self.shape().plane();
        for spec in adapters {
            let adapter = self
                .adapters
                .get(&spec.id)
                .ok_or_else(|| PredictError::UnknownAdapter(spec.id.clone()))?;
            for (i, (m, &d)) in mean.iter_mut().zip(adapter.offset.as_slice()).enumerate() {
                if adapter.mask[i % plane] {
                    *m += spec.scale * f64::from(d);
                }
            }
        }
        Ok(LatentTensor::new(
            self.shape(),
            mean.into_iter().map(|v| v as f32).collect(),
        )?)
    }

    /// Draws `x0 ~ N(mu, var * I)`.
    pub fn sample(
        &self,
        condition: &ConditionRef,
        adapters: &[AdapterSpec],
        rng: &mut impl Rng,
    ) -> Result<LatentTensor, PredictError> {
        let mean = self.concept_mean(condition, adapters)?;
        let sd = self.variance.sqrt();
        let data = mean
            .as_slice()
            .iter()
            .map(|&m| (f64::from(m) + sd * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        Ok(LatentTensor::new(mean.shape(), data)?)
    }

    /// Closed-form noise prediction at an explicit signal fraction.
    pub fn eps_at(
        &self,
        latent: &LatentTensor,
        alpha_bar: f64,
        mean: &LatentTensor,
    ) -> Result<LatentTensor, PredictError> {
        let signal = alpha_bar.sqrt();
        let noise = (1.0 - alpha_bar).sqrt();
        let denom = alpha_bar * self.variance + (1.0 - alpha_bar);
        Ok(latent.zip_map(mean, |z, m| {
            (noise * (f64::from(z) - signal * f64::from(m)) / denom) as f32
        })?)
    }

    pub fn from_spec(spec: &AnalyticModelSpec, schedule: NoiseSchedule) -> Result<Self, PredictError> {
        let [c, h, w] = spec.shape;
        let shape = Shape::new(c, h, w)?;
        let base = per_channel(shape, &spec.base_mean, None, "base_mean")?;
        let mut model = Self::new(schedule, base, spec.variance)?;
        for (name, off) in &spec.conditions {
            let t = per_channel(shape, &off.offset, off.region.as_ref(), name)?;
            model.add_condition(name.clone(), t)?;
        }
        for (id, off) in &spec.adapters {
            let region = off.region.unwrap_or(Region::full(shape));
            let t = per_channel(shape, &off.offset, Some(&region), id)?;
            model.add_adapter(id.clone(), region.mask(shape)?, t)?;
        }
        Ok(model)
    }
}

impl PredictorBackend for GaussianConceptModel {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            shape: self.shape(),
            conditions: Some(self.conditions.keys().cloned().collect()),
            adapters: Some(self.adapters.keys().cloned().collect::<BTreeSet<_>>()),
        }
    }

    fn predict_raw(&self, r: &PredictRequest<'_>) -> Result<LatentTensor, PredictError> {
        let ab = self.schedule.alpha_bar(r.timestep)?;
        let mean = self.concept_mean(r.condition, r.adapters)?;
        self.eps_at(r.latent, ab, &mean)
    }
}

/// Axis-aligned spatial rectangle in latent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(shape: Shape) -> Self {
        Self {
            top: 0,
            left: 0,
            height: shape.height,
            width: shape.width,
        }
    }

    pub fn contains(&self, h: usize, w: usize) -> bool {
        h >= self.top && h < self.top + self.height && w >= self.left && w < self.left + self.width
    }

    pub fn mask(&self, shape: Shape) -> Result<Vec<bool>, PredictError> {
        if self.height == 0
            || self.width == 0
            || self.top + self.height > shape.height
            || self.left + self.width > shape.width
        {
            return Err(PredictError::InvalidModel(format!(
                "region {self:?} does not fit a {shape} latent"
            )));
        }
        Ok((0..shape.plane())
            .map(|i| self.contains(i / shape.width, i % shape.width))
            .collect())
    }
}

/// Constant per-channel offset, optionally restricted to a region.
/// `offset` holds one value (broadcast) or one per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetSpec {
    #[serde(default)]
    pub offset: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

/// Serializable description of a [`GaussianConceptModel`]. The schedule is
/// supplied separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticModelSpec {
    pub shape: [usize; 3],
    pub variance: f64,
    #[serde(default)]
    pub base_mean: Vec<f32>,
    pub conditions: BTreeMap<String, OffsetSpec>,
    #[serde(default)]
    pub adapters: BTreeMap<String, OffsetSpec>,
}

fn per_channel(
    shape: Shape,
    values: &[f32],
    region: Option<&Region>,
    what: &str,
) -> Result<LatentTensor, PredictError> {
    let lookup: Box<dyn Fn(usize) -> f32> = match values.len() {
        0 => Box::new(|_| 0.0),
        1 => {
            let v = values[0];
            Box::new(move |_| v)
        }
        n if n == shape.channels => Box::new(|c| values[c]),
        n => {
            return Err(PredictError::InvalidModel(format!(
                "'{what}' has {n} offset values for {} channels",
                shape.channels
            )))
        }
    };
    let mask = region.map(|r| r.mask(shape)).transpose()?;
    Ok(LatentTensor::from_fn(shape, |c, h, w| match &mask {
        Some(m) if !m[h * shape.width + w] => 0.0,
        _ => lookup(c),
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::predict;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    fn scalar(v: f32) -> LatentTensor {
        LatentTensor::new(Shape::new(1, 1, 1).unwrap(), vec![v]).unwrap()
    }

    fn one_d(mean: f32, variance: f64, alpha_bar: f64) -> GaussianConceptModel {
        let sched = NoiseSchedule::from_alpha_bar(vec![alpha_bar]).unwrap();
        let mut m = GaussianConceptModel::new(sched, scalar(mean), variance).unwrap();
        m.add_condition("c", scalar(0.0)).unwrap();
        m
    }

    fn cond() -> ConditionRef {
        ConditionRef::new("c").unwrap()
    }

    #[test]
    fn closed_form_scalar() {
        let m = one_d(0.0, 1.0, 0.5);
        let eps = predict(&m, &scalar(1.0), 1, &cond(), &[]).unwrap();
        assert!((eps.as_slice()[0] - 0.707_106_77).abs() < 1e-6);
    }

    #[test]
    fn mean_point_predicts_zero_noise() {
        let m = one_d(1.7, 2.0, 0.3);
        let z = scalar((0.3f64.sqrt() * 1.7) as f32);
        let eps = predict(&m, &z, 1, &cond(), &[]).unwrap();
        assert!(eps.as_slice()[0].abs() < 1e-6);
    }

    #[test]
    fn pure_noise_limit_returns_latent() {
        let m = one_d(3.0, 2.0, 0.5);
        let mean = scalar(3.0);
        let z = scalar(0.8);
        let eps = m.eps_at(&z, 1e-12, &mean).unwrap();
        assert!((eps.as_slice()[0] - 0.8).abs() < 1e-5);
    }

    /// Monte-Carlo posterior mean E[eps | z_t] by importance weighting the prior.
    #[test]
    fn closed_form_matches_monte_carlo_posterior() {
        let (mu, var, ab) = (0.4f64, 1.5f64, 0.6f64);
        let m = one_d(mu as f32, var, ab);
        let z = 0.9f64;
        let mut rng = SplitMix64::seed_from_u64(11);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for _ in 0..400_000 {
            let x0 = mu + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let eps = (z - ab.sqrt() * x0) / (1.0 - ab).sqrt();
            let w = (-0.5 * eps * eps).exp();
            num += w * eps;
            den += w;
        }
        let mc = num / den;
        let closed = predict(&m, &scalar(z as f32), 1, &cond(), &[]).unwrap().as_slice()[0];
        assert!((f64::from(closed) - mc).abs() < 5e-3, "closed {closed} vs mc {mc}");
    }

    /// eps_hat = -sqrt(1 - ab) * d/dz log p(z), checked by central differences.
    #[test]
    fn prediction_is_scaled_marginal_score() {
        for &(mu, var, ab, z) in &[(0.0, 1.0, 0.5, 1.0), (1.2, 0.3, 0.9, -0.4), (-2.0, 4.0, 0.05, 0.7)] {
            let m = one_d(mu as f32, var, ab);
            let s2 = ab * var + 1.0 - ab;
            let log_p = |z: f64| -0.5 * (z - ab.sqrt() * mu).powi(2) / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
            let h = 1e-4;
            let score = (log_p(z + h) - log_p(z - h)) / (2.0 * h);
            let expected = -(1.0 - ab).sqrt() * score;
            let got = predict(&m, &scalar(z as f32), 1, &cond(), &[]).unwrap().as_slice()[0];
            assert!((f64::from(got) - expected).abs() < 1e-4, "{got} vs {expected}");
        }
    }

    fn two_region_model() -> GaussianConceptModel {
        let spec: AnalyticModelSpec = serde_json::from_str(
            r#"{
                "shape": [2, 4, 4],
                "variance": 2.0,
                "base_mean": [0.5, -0.5],
                "conditions": {"c": {}},
                "adapters": {
                    "a": {"offset": [1.0, 2.0], "region": {"top": 0, "left": 0, "height": 2, "width": 2}},
                    "b": {"offset": [-1.0], "region": {"top": 2, "left": 2, "height": 2, "width": 2}}
                }
            }"#,
        )
        .unwrap();
        GaussianConceptModel::from_spec(&spec, NoiseSchedule::stable_diffusion()).unwrap()
    }

    #[test]
    fn adapter_changes_prediction_only_inside_its_region() {
        let m = two_region_model();
        let shape = m.shape();
        let mut rng = SplitMix64::seed_from_u64(3);
        let z = LatentTensor::from_fn(shape, |_, _, _| rng.sample::<f32, _>(StandardNormal)).unwrap();
        let base = predict(&m, &z, 400, &cond(), &[]).unwrap();
        let with_a = predict(&m, &z, 400, &cond(), &[AdapterSpec::new("a", 0.8).unwrap()]).unwrap();
        let mask = m.adapter("a").unwrap().mask().to_vec();
        for c in 0..shape.channels {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    let (b, a) = (base.get(c, h, w), with_a.get(c, h, w));
                    if mask[h * shape.width + w] {
                        assert_ne!(a, b);
                    } else {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn adapter_scale_multiplies_offset() {
        let m = two_region_model();
        let c = cond();
        let mean = m.concept_mean(&c, &[AdapterSpec::new("a", 0.8).unwrap()]).unwrap();
        assert!((mean.get(1, 0, 0) - (-0.5 + 1.6)).abs() < 1e-6);
        assert_eq!(mean.get(1, 3, 3), -0.5);
    }

    #[test]
    fn invalid_models_rejected() {
        let sched = NoiseSchedule::stable_diffusion();
        assert!(GaussianConceptModel::new(sched.clone(), scalar(0.0), 0.0).is_err());
        let shape = Shape::new(1, 2, 2).unwrap();
        let mut m = GaussianConceptModel::new(sched, LatentTensor::zeros(shape), 1.0).unwrap();
        let offset = LatentTensor::filled(shape, 1.0);
        assert!(m.add_adapter("x", vec![true, false, false, false], offset).is_err());
        assert!(m.add_adapter("x", vec![true], LatentTensor::zeros(shape)).is_err());
        let bad_region = Region { top: 1, left: 0, height: 2, width: 1 };
        assert!(bad_region.mask(shape).is_err());
    }
}
