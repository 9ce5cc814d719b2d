//! Geometric noise schedules for multi-scale denoising score matching.

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_GAMMA: f64 = 0.99;

/// Strictly decreasing `sigma_1 > ... > sigma_N` with `sigma_n = sigma_1 gamma^(n-1)`
/// and per-scale loss weights `sigma_i^2`.
///
/// Scale indices are 1-based throughout the public API: index 1 is the
/// largest noise level and index `len()` the smallest.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    gamma: f64,
}

impl NoiseSchedule {
    /// Fits the number of scales to `(sigma_max, sigma_min, gamma_hint)` and
    /// then re-fits gamma so both endpoints are exact.
    pub fn from_endpoints(sigma_max: f64, sigma_min: f64, gamma_hint: f64) -> Result<Self> {
        if !(sigma_min > 0.0) || !sigma_max.is_finite() {
            return Err(Error::precondition("noise levels must be positive and finite"));
        }
        if !(gamma_hint > 0.0 && gamma_hint < 1.0) {
            return Err(Error::precondition(format!("gamma {gamma_hint} not in (0,1)")));
        }
        if sigma_max <= sigma_min {
            return Err(Error::DegenerateSchedule {
                sigma_max,
                sigma_min,
            });
        }
        let ratio = sigma_min / sigma_max;
        let intervals = (ratio.ln() / gamma_hint.ln()).ceil().max(1.0) as usize;
        let gamma = ratio.powf(1.0 / intervals as f64);
        let mut sigmas: Vec<f64> = (0..=intervals)
            .map(|k| sigma_max * gamma.powi(k as i32))
            .collect();
        sigmas[0] = sigma_max;
        sigmas[intervals] = sigma_min;
        Ok(Self { sigmas, gamma })
    }

    /// Rebuilds a schedule from an explicit list (checkpoint loading).
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::schema("schedule needs at least two noise levels"));
        }
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::schema("noise levels must be positive and finite"));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::schema("noise levels must be strictly decreasing"));
        }
        let n = sigmas.len();
        let gamma = (sigmas[n - 1] / sigmas[0]).powf(1.0 / (n - 1) as f64);
        Ok(Self { sigmas, gamma })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Noise level at 1-based `index`.
    pub fn sigma(&self, index: usize) -> f64 {
        self.sigmas[index - 1]
    }

    /// Loss weight at 1-based `index`: `sigma^2`.
    pub fn weight(&self, index: usize) -> f64 {
        let s = self.sigma(index);
        s * s
    }

    pub fn weights(&self) -> Vec<f64> {
        self.sigmas.iter().map(|s| s * s).collect()
    }

    pub fn largest(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn smallest(&self) -> f64 {
        self.sigmas[self.sigmas.len() - 1]
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index == 0 || index > self.len() {
            return Err(Error::precondition(format!(
                "scale index {index} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Scale index for a remaining-noise fraction `t0` along the schedule:
    /// `max(1, round((1 - t0)(N - 1)) + 1)`.
    pub fn index_for_fraction(&self, t0: f64) -> Result<usize> {
        if !(t0 > 0.0 && t0 <= 1.0) {
            return Err(Error::precondition(format!("t0 {t0} not in (0,1]")));
        }
        let n = self.len();
        let idx = ((1.0 - t0) * (n - 1) as f64).round() as usize + 1;
        Ok(idx.clamp(1, n))
    }
}

/// Largest Euclidean distance between any two samples (exact pairwise scan).
pub fn max_pairwise_distance(samples: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}

/// `sigma_1` = max pairwise distance, `sigma_N` = 0.01, gamma near 0.99.
pub fn make_schedule(dataset: &Dataset) -> Result<NoiseSchedule> {
    make_schedule_with(dataset, DEFAULT_SIGMA_MIN, DEFAULT_GAMMA)
}

pub fn make_schedule_with(dataset: &Dataset, sigma_min: f64, gamma: f64) -> Result<NoiseSchedule> {
    if dataset.len() < 2 {
        return Err(Error::precondition(format!(
            "schedule needs >= 2 samples, dataset has {}",
            dataset.len()
        )));
    }
    NoiseSchedule::from_endpoints(max_pairwise_distance(dataset.samples()), sigma_min, gamma)
}
