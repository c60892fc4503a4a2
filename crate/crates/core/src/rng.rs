//! Explicitly seeded randomness.
//!
//! All secret material comes from ChaCha20 keyed by a 64-bit seed, with the
//! ChaCha stream id separating independent consumers of the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub type DetRng = ChaCha20Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Box–Muller normal sampler. Keeps the second variate of each pair.
#[derive(Debug, Default)]
pub struct Gaussian {
    spare: Option<f64>,
}

impl Gaussian {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn standard(&mut self, rng: &mut impl Rng) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so ln(u1) is finite.
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }

    pub fn sample(&mut self, rng: &mut impl Rng, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.standard(rng)
    }
}
