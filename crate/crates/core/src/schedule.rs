//! Discrete noise schedules, forward noising and descending timestep plans.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{LatentTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid timestep plan: {0}")]
    InvalidPlan(String),
    #[error(
        "timestep plan with {steps} steps collides after rounding on [{t_min}, {t_max}]; use fewer steps"
    )]
    RoundingCollision {
        steps: usize,
        t_max: usize,
        t_min: usize,
    },
    #[error("timestep {t} outside [1, {num_steps}]")]
    TimestepOutOfRange { t: usize, num_steps: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Linear,
    /// Betas are the squares of a linear ramp in `sqrt(beta)` space.
    #[default]
    ScaledLinear,
}

/// Cumulative signal fractions `alpha_bar_1 .. alpha_bar_T`, indexed from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(
        kind: BetaSchedule,
        num_steps: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self, ScheduleError> {
        if num_steps == 0 {
            return Err(ScheduleError::InvalidParameters(
                "step count must be positive".into(),
            ));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::InvalidParameters(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let ramp = |lo: f64, hi: f64, i: usize| {
            if num_steps == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (num_steps - 1) as f64
            }
        };
        let mut alpha_bar = Vec::with_capacity(num_steps);
        let mut acc = 1.0f64;
        for i in 0..num_steps {
            let beta = match kind {
                BetaSchedule::Linear => ramp(beta_start, beta_end, i),
                BetaSchedule::ScaledLinear => ramp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// The 1000-step scaled-linear schedule with betas in `[0.00085, 0.012]`.
    pub fn stable_diffusion() -> Self {
        Self::new(BetaSchedule::ScaledLinear, 1000, 0.00085, 0.012)
            .expect("default schedule parameters are valid")
    }

    /// Builds a schedule from explicit cumulative products.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, ScheduleError> {
        if alpha_bar.is_empty() {
            return Err(ScheduleError::InvalidParameters("empty schedule".into()));
        }
        if let Some(a) = alpha_bar.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(ScheduleError::InvalidParameters(format!(
                "alpha_bar value {a} outside (0, 1)"
            )));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ScheduleError::InvalidParameters(
                "alpha_bar must be strictly decreasing".into(),
            ));
        }
        Ok(Self { alpha_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        if t == 0 || t > self.alpha_bar.len() {
            return Err(ScheduleError::TimestepOutOfRange {
                t,
                num_steps: self.alpha_bar.len(),
            });
        }
        Ok(self.alpha_bar[t - 1])
    }

    /// Forward-noises `x0` to timestep `t`: `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
    pub fn add_noise(
        &self,
        x0: &LatentTensor,
        eps: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor, ScheduleError> {
        let ab = self.alpha_bar(t)?;
        Ok(noise_with_alpha_bar(x0, eps, ab)?)
    }
}

/// Forward noising at an explicit signal fraction `alpha_bar` in `[0, 1]`.
pub fn noise_with_alpha_bar(
    x0: &LatentTensor,
    eps: &LatentTensor,
    alpha_bar: f64,
) -> Result<LatentTensor, TensorError> {
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    x0.zip_map(eps, |x, e| {
        (signal * f64::from(x) + noise * f64::from(e)) as f32
    })
}

/// A strictly descending sequence of timesteps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    /// `K` linearly spaced timesteps from `t_max` down to `t_min`, rounded to integers.
    pub fn linear(steps: usize, t_max: usize, t_min: usize) -> Result<Self, ScheduleError> {
        if steps == 0 {
            return Err(ScheduleError::InvalidPlan("step count must be at least 1".into()));
        }
        if t_min == 0 || t_min > t_max {
            return Err(ScheduleError::InvalidPlan(format!(
                "need 1 <= t_min <= t_max, got t_min={t_min}, t_max={t_max}"
            )));
        }
        if steps > t_max - t_min + 1 {
            return Err(ScheduleError::RoundingCollision {
                steps,
                t_max,
                t_min,
            });
        }
        if steps == 1 {
            return Ok(Self { steps: vec![t_max] });
        }
        let span = (t_max - t_min) as f64;
        let plan: Vec<usize> = (0..steps)
            .map(|k| (t_max as f64 - k as f64 * span / (steps - 1) as f64).round() as usize)
            .collect();
        if plan.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ScheduleError::RoundingCollision {
                steps,
                t_max,
                t_min,
            });
        }
        Ok(Self { steps: plan })
    }

    /// Validates an explicit plan.
    pub fn from_steps(steps: Vec<usize>) -> Result<Self, ScheduleError> {
        if steps.is_empty() || steps.contains(&0) {
            return Err(ScheduleError::InvalidPlan(
                "plan must be non-empty with timesteps >= 1".into(),
            ));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ScheduleError::InvalidPlan("plan must be strictly decreasing".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn check_within(&self, schedule: &NoiseSchedule) -> Result<(), ScheduleError> {
        let t = self.steps[0];
        if t > schedule.num_steps() {
            return Err(ScheduleError::TimestepOutOfRange {
                t,
                num_steps: schedule.num_steps(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn scalar(v: f32) -> LatentTensor {
        LatentTensor::new(Shape::new(1, 1, 1).unwrap(), vec![v]).unwrap()
    }

    #[test]
    fn linear_two_step_products() {
        let s = NoiseSchedule::new(BetaSchedule::Linear, 2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn scaled_linear_first_value() {
        let s = NoiseSchedule::stable_diffusion();
        assert_eq!(s.num_steps(), 1000);
        assert!((s.alpha_bar(1).unwrap() - 0.99915).abs() < 1e-12);
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(NoiseSchedule::new(BetaSchedule::Linear, 0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(BetaSchedule::Linear, 10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(BetaSchedule::Linear, 10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::new(BetaSchedule::Linear, 10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.6]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0]).is_err());
    }

    #[test]
    fn plan_examples() {
        assert_eq!(TimestepPlan::linear(2, 970, 30).unwrap().steps(), &[970, 30]);
        assert_eq!(
            TimestepPlan::linear(5, 900, 100).unwrap().steps(),
            &[900, 700, 500, 300, 100]
        );
        assert_eq!(TimestepPlan::linear(1, 500, 30).unwrap().steps(), &[500]);
        assert!(matches!(
            TimestepPlan::linear(10, 5, 1),
            Err(ScheduleError::RoundingCollision { .. })
        ));
        assert!(TimestepPlan::linear(0, 5, 1).is_err());
        assert!(TimestepPlan::linear(2, 5, 0).is_err());
        assert!(TimestepPlan::from_steps(vec![5, 5]).is_err());
    }

    #[test]
    fn default_plan_has_300_distinct_steps() {
        let p = TimestepPlan::linear(300, 970, 30).unwrap();
        assert_eq!(p.len(), 300);
        assert_eq!(p.steps()[0], 970);
        assert_eq!(p.steps()[299], 30);
    }

    #[test]
    fn add_noise_limits_and_scalar_check() {
        let x0 = scalar(2.0);
        let eps = scalar(1.0);
        assert_eq!(noise_with_alpha_bar(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(noise_with_alpha_bar(&x0, &eps, 0.0).unwrap(), eps);
        let z = noise_with_alpha_bar(&x0, &eps, 0.25).unwrap();
        assert!((z.as_slice()[0] - 1.866_025_4).abs() < 1e-6);

        let s = NoiseSchedule::from_alpha_bar(vec![0.25]).unwrap();
        assert_eq!(s.add_noise(&x0, &eps, 1).unwrap(), z);
        assert!(matches!(
            s.add_noise(&x0, &eps, 2),
            Err(ScheduleError::TimestepOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(
            kind in prop_oneof![Just(BetaSchedule::Linear), Just(BetaSchedule::ScaledLinear)],
            n in 1usize..2000,
            lo in 1e-5f64..0.05,
            width in 0.0f64..0.05,
        ) {
            let s = NoiseSchedule::new(kind, n, lo, lo + width).unwrap();
            prop_assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a < 1.0));
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }

        #[test]
        fn plan_strictly_decreasing_and_bounded(t_min in 1usize..500, span in 0usize..500, k in 1usize..600) {
            let t_max = t_min + span;
            let k = k.min(span + 1);
            let p = TimestepPlan::linear(k, t_max, t_min).unwrap();
            prop_assert_eq!(p.len(), k);
            prop_assert_eq!(p.steps()[0], t_max);
            prop_assert!(p.steps().iter().all(|&t| t >= t_min && t <= t_max));
            prop_assert!(p.steps().windows(2).all(|w| w[1] < w[0]));
        }

        #[test]
        fn add_noise_is_linear(x in -10f32..10.0, e in -10f32..10.0, a in -4f32..4.0, ab in 0.001f64..0.999) {
            let lhs = noise_with_alpha_bar(&scalar(a * x), &scalar(a * e), ab).unwrap().as_slice()[0];
            let rhs = a * noise_with_alpha_bar(&scalar(x), &scalar(e), ab).unwrap().as_slice()[0];
            prop_assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + rhs.abs()));
        }
    }
}
