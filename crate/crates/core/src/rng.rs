//! Engine-owned noise generator.
//!
//! Noise is a SplitMix64 stream seeded from the run config. Standard normals
//! are drawn with `rand_distr::StandardNormal` (ziggurat), one value per
//! element in row-major order.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::tensor::{LatentTensor, Shape};

#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: SplitMix64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn gaussian(&mut self, shape: Shape) -> LatentTensor {
        let data = (0..shape.len())
            .map(|_| self.rng.sample::<f32, _>(StandardNormal))
            .collect();
        LatentTensor::new(shape, data).expect("standard normal samples are finite")
    }

    pub fn rng_mut(&mut self) -> &mut SplitMix64 {
        &mut self.rng
    }
}
