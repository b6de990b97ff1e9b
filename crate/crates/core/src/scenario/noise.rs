//! Measurement noise on the scalar cost channel.
//!
//! Draw `s` of a stream is a pure function of `(seed, s)`: the ChaCha20 block
//! function keyed by the seed is positioned at word `4·s`, two 64-bit words are
//! read, and the Box–Muller cosine branch turns them into one standard normal.
//! No state is carried between draws, so episodes can be evaluated in any
//! order and still reproduce exactly.

use std::f64::consts::TAU;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub std_dev: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            std_dev: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn new(std_dev: f64, seed: u64) -> Result<Self> {
        let m = NoiseModel { std_dev, seed };
        m.validate()?;
        Ok(m)
    }

    pub fn noiseless() -> Self {
        NoiseModel::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std_dev.is_finite() && self.std_dev >= 0.0) {
            return Err(Error::Validation(format!(
                "noise std_dev must be finite and >= 0, got {}",
                self.std_dev
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NoiseModel { seed, ..self }
    }

    /// Additive noise for stream position `position`; exactly zero when noiseless.
    pub fn draw(&self, position: u64) -> f64 {
        if self.std_dev == 0.0 {
            return 0.0;
        }
        self.std_dev * standard_normal(self.seed, position)
    }

    /// `J + noise(position)`.
    pub fn measure(&self, cost: f64, position: u64) -> f64 {
        cost + self.draw(position)
    }
}

/// Standard normal variate at `position` of the stream keyed by `seed`.
pub fn standard_normal(seed: u64, position: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_word_pos(4 * position as u128);
    // (0, 1]: never zero so the logarithm stays finite.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_measurement_is_exact() {
        let m = NoiseModel::noiseless();
        assert_eq!(m.measure(3.25, 17), 3.25);
    }

    #[test]
    fn draws_are_position_addressed() {
        let a: Vec<f64> = (0..50).map(|s| standard_normal(9, s)).collect();
        let b: Vec<f64> = (0..50).rev().map(|s| standard_normal(9, s)).collect();
        let b: Vec<f64> = b.into_iter().rev().collect();
        assert_eq!(a, b);
        assert_ne!(standard_normal(9, 3), standard_normal(10, 3));
    }

    #[test]
    fn moments_are_standard() {
        let n = 20_000;
        let z: Vec<f64> = (0..n).map(|s| standard_normal(42, s)).collect();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.04, "var {var}");
    }

    #[test]
    fn negative_std_rejected() {
        assert!(NoiseModel::new(-0.1, 0).is_err());
        assert!(NoiseModel::new(f64::NAN, 0).is_err());
    }
}
