//! Seeded noise sources.
//!
//! Gaussian draws come from a ChaCha8 stream passed through the ziggurat
//! transform of `rand_distr::StandardNormal`. A trial is addressed by
//! `(seed, stream)`, so trial `i` of a sweep is independent of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A source of process noise vectors.
pub trait NoiseSource {
    /// Overwrites `w` with the next noise vector.
    fn fill(&mut self, w: &mut [f64]);
}

/// i.i.d. standard Normal noise.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream `stream` of master seed `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        GaussianNoise { rng }
    }

    /// One standard Normal draw.
    #[inline]
    pub fn sample(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Underlying generator, for non-noise randomness drawn from the same stream.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl NoiseSource for GaussianNoise {
    #[inline]
    fn fill(&mut self, w: &mut [f64]) {
        for wi in w.iter_mut() {
            *wi = self.rng.sample(StandardNormal);
        }
    }
}

/// Always zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill(&mut self, w: &mut [f64]) {
        w.fill(0.0);
    }
}

/// Replays a fixed sequence, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct ReplayNoise {
    values: Vec<f64>,
    pos: usize,
}

impl ReplayNoise {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "replay noise needs at least one value");
        ReplayNoise { values, pos: 0 }
    }
}

impl NoiseSource for ReplayNoise {
    fn fill(&mut self, w: &mut [f64]) {
        for wi in w.iter_mut() {
            *wi = self.values[self.pos];
            self.pos = (self.pos + 1) % self.values.len();
        }
    }
}

/// RNG for auxiliary randomness (system generation, OFU starts, sampling).
pub fn aux_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
