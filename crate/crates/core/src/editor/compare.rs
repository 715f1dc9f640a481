//! Side-by-side runs of the three objectives.

use super::{run_edit, EditConfig, EditError, EditOutcome, Objective, RunOptions};
use crate::predictor::PredictorBackend;
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone)]
pub struct ObjectiveComparison {
    pub runs: Vec<(Objective, EditOutcome)>,
}

impl ObjectiveComparison {
    pub fn get(&self, objective: Objective) -> Option<&EditOutcome> {
        self.runs.iter().find(|(o, _)| *o == objective).map(|(_, r)| r)
    }
}

/// Runs SDS, DDS and CDS with the same seed and timestep plan.
pub fn compare_objectives(
    cfg: &EditConfig,
    schedule: &NoiseSchedule,
    backend: &dyn PredictorBackend,
    x0_src: &LatentTensor,
    options: &RunOptions,
) -> Result<ObjectiveComparison, EditError> {
    let mut runs = Vec::with_capacity(3);
    for objective in Objective::ALL {
        let run_cfg = EditConfig {
            objective,
            ..cfg.clone()
        };
        runs.push((objective, run_edit(&run_cfg, schedule, backend, x0_src, options)?));
    }
    Ok(ObjectiveComparison { runs })
}

/// Mean absolute 5-point Laplacian over interior pixels of every channel.
/// Zero for tensors smaller than 3x3.
pub fn mean_abs_laplacian(t: &LatentTensor) -> f64 {
    let s = t.shape();
    if s.height < 3 || s.width < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..s.channels {
        for h in 1..s.height - 1 {
            for w in 1..s.width - 1 {
                let v = |h: usize, w: usize| f64::from(t.get(c, h, w));
                let lap = v(h - 1, w) + v(h + 1, w) + v(h, w - 1) + v(h, w + 1) - 4.0 * v(h, w);
                total += lap.abs();
                count += 1;
            }
        }
    }
    total / count as f64
}
