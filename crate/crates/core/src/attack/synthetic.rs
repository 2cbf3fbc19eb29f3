//! Synthetic accuracy oracle.
//!
//! Stands in for a trained model whose accuracy grows with the number of
//! key positions that agree with the true key:
//!
//! ```text
//! acc(k) = base + (top - base) * ((n - d(k, true)) / n)^gamma + noise(k)
//! ```
//!
//! clamped to `[0, 1]`. The noise term is Gaussian with standard deviation
//! `noise_sigma`, drawn from a generator seeded by `(noise_seed, k)`, so the
//! same key always gets the same score.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::oracle::{AccuracySource, Oracle, OracleError};
use crate::key::{hamming_distance, serialize_key, Key};

const NOISE_LABEL: &[u8] = b"negpos/synthetic-noise/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracleParams {
    pub true_key: Key,
    /// Accuracy when no position agrees.
    pub base_accuracy: f64,
    /// Accuracy when every position agrees.
    pub top_accuracy: f64,
    pub shape_gamma: f64,
    pub noise_sigma: f64,
    pub noise_seed: Vec<u8>,
}

impl SyntheticOracleParams {
    /// Noiseless parameters with a linear response.
    pub fn noiseless(true_key: Key, base_accuracy: f64, top_accuracy: f64) -> Self {
        Self {
            true_key,
            base_accuracy,
            top_accuracy,
            shape_gamma: 1.0,
            noise_sigma: 0.0,
            noise_seed: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.base_accuracy) || !unit(self.top_accuracy) {
            return Err(OracleError::Parameter("accuracies must lie in [0, 1]".into()));
        }
        if self.base_accuracy > self.top_accuracy {
            return Err(OracleError::Parameter(format!(
                "base accuracy {} exceeds top accuracy {}",
                self.base_accuracy, self.top_accuracy
            )));
        }
        if !(self.shape_gamma.is_finite() && self.shape_gamma > 0.0) {
            return Err(OracleError::Parameter("shape gamma must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(OracleError::Parameter("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticAccuracy {
    params: SyntheticOracleParams,
}

impl SyntheticAccuracy {
    pub fn new(params: SyntheticOracleParams) -> Result<Self, OracleError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &SyntheticOracleParams {
        &self.params
    }

    /// Scores a key without any query accounting.
    pub fn score(&self, key: &Key) -> Result<f64, OracleError> {
        let p = &self.params;
        let n = p.true_key.len() as f64;
        let d = hamming_distance(key, &p.true_key)? as f64;
        let agreement = ((n - d) / n).powf(p.shape_gamma);
        let mut acc = p.base_accuracy + (p.top_accuracy - p.base_accuracy) * agreement;
        if p.noise_sigma > 0.0 {
            acc += self.noise(key);
        }
        Ok(acc.clamp(0.0, 1.0))
    }

    fn noise(&self, key: &Key) -> f64 {
        let mut h = Sha256::new();
        h.update(NOISE_LABEL);
        h.update((self.params.noise_seed.len() as u64).to_be_bytes());
        h.update(&self.params.noise_seed);
        h.update(serialize_key(key));
        let mut rng = ChaCha20Rng::from_seed(h.finalize().into());
        Normal::new(0.0, self.params.noise_sigma)
            .expect("sigma validated")
            .sample(&mut rng)
    }
}

impl AccuracySource for SyntheticAccuracy {
    fn shape(&self) -> (usize, usize) {
        (self.params.true_key.channels(), self.params.true_key.block_size())
    }

    fn accuracy(&mut self, key: &Key) -> Result<f64, OracleError> {
        self.score(key)
    }
}

pub fn make_synthetic_oracle(params: SyntheticOracleParams, budget: Option<usize>) -> Result<Oracle, OracleError> {
    Oracle::new(Box::new(SyntheticAccuracy::new(params)?), budget)
}
