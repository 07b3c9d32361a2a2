//! Norm clipping, the Gaussian mechanism, and noise calibration.

pub mod cache;
mod rdp;

pub use rdp::{calibrate_noise, verify_epsilon, SIGMA_CEILING};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::l2_norm;

/// Privacy parameters for one training run, with the calibrated noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Clipping bound on each contribution's l2 norm.
    pub clip_bound: f64,
    /// Number of aggregation rounds composed.
    pub iterations: usize,
    /// Cohort size sampled per round.
    pub cohort_size: usize,
    /// Population size used by the accountant.
    pub population: usize,
    /// Noise multiplier: per-coordinate noise std is `clip_bound * sigma`.
    pub sigma: f64,
}

impl PrivacyConfig {
    /// Calibrate the noise multiplier for the given parameters.
    pub fn calibrated(
        epsilon: f64,
        delta: f64,
        clip_bound: f64,
        iterations: usize,
        cohort_size: usize,
        population: usize,
    ) -> Result<Self> {
        if !(clip_bound.is_finite() && clip_bound > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clipping bound must be finite and positive, got {clip_bound}"
            )));
        }
        let sigma = calibrate_noise(population, cohort_size, epsilon, delta, iterations)?;
        Ok(PrivacyConfig {
            epsilon,
            delta,
            clip_bound,
            iterations,
            cohort_size,
            population,
            sigma,
        })
    }

    pub fn sampling_rate(&self) -> f64 {
        self.cohort_size as f64 / self.population as f64
    }
}

/// Scale `v` by min(1, c / ||v||), so the result has norm at most `c` and
/// the direction is preserved. The zero vector passes through unchanged.
pub fn clip_in_place(v: &mut [f64], c: f64) {
    assert!(c > 0.0, "clipping bound must be positive");
    let norm = l2_norm(v);
    if norm > c {
        let scale = c / norm;
        for x in v.iter_mut() {
            *x *= scale;
        }
    }
}

pub fn clip_vector(v: &[f64], c: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    clip_in_place(&mut out, c);
    out
}

/// Add i.i.d. Gaussian noise with per-coordinate standard deviation
/// `c * sigma` to `sum`. With `sigma == 0` the sum is returned exactly.
pub fn gaussian_mechanism_in_place<R: Rng>(sum: &mut [f64], c: f64, sigma: f64, rng: &mut R) {
    assert!(sigma >= 0.0, "noise multiplier must be nonnegative");
    if sigma == 0.0 {
        return;
    }
    let scale = c * sigma;
    for x in sum.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x += scale * z;
    }
}

pub fn gaussian_mechanism<R: Rng>(sum: &[f64], c: f64, sigma: f64, rng: &mut R) -> Vec<f64> {
    let mut out = sum.to_vec();
    gaussian_mechanism_in_place(&mut out, c, sigma, rng);
    out
}
