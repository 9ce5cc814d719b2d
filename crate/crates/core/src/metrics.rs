//! Sample-quality metrics against a known Gaussian-mixture oracle.
//!
//! The Fréchet distance is computed on raw coordinates from mean/covariance
//! fits; coverage and density statistics use the exact mixture.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::synthetic::{GaussianMixture, SampleVec};

pub const COVARIANCE_JITTER: f64 = 1e-9;
pub const DEFAULT_RADIUS_SIGMAS: f64 = 3.0;
pub const REFERENCE_DRAWS: usize = 100_000;
pub const REFERENCE_SEED: u64 = 0x5EED_0D15;
pub const QUALITY_PERCENTILE: f64 = 0.05;

/// Mean and covariance of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    /// Unbiased covariance plus `1e-9 I`; needs at least `d + 1` samples.
    pub fn fit(samples: &[SampleVec]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::precondition("moment fit needs samples"));
        };
        let d = first.len();
        if samples.len() < d + 1 {
            return Err(Error::precondition(format!(
                "moment fit in d={d} needs >= {} samples, got {}",
                d + 1,
                samples.len()
            )));
        }
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(d);
        for s in samples {
            check_dim(d, s.len(), "moment fit sample")?;
            mean += DVector::from_column_slice(s);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= n - 1.0;
        for i in 0..d {
            cov[(i, i)] += COVARIANCE_JITTER;
        }
        Ok(Self { mean, cov })
    }
}

/// Symmetric PSD square root, negative eigenvalues clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the trace of
/// the product root taken as `Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_from_moments(a: &Moments, b: &Moments) -> Result<f64> {
    check_dim(a.mean.len(), b.mean.len(), "Fréchet moments")?;
    let root_a = psd_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    Ok((diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_gaussian(samples_a: &[SampleVec], samples_b: &[SampleVec]) -> Result<f64> {
    frechet_from_moments(&Moments::fit(samples_a)?, &Moments::fit(samples_b)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub coverage: f64,
    /// Samples assigned to each mode (nearest mean).
    pub histogram: Vec<usize>,
    pub covered: Vec<bool>,
}

/// Nearest-mode assignment; a mode is covered when some sample assigned to
/// it lies within `radius_sigmas` times its largest standard deviation.
pub fn mode_coverage(samples: &[SampleVec], gmm: &GaussianMixture, radius_sigmas: f64) -> Result<Coverage> {
    let means = gmm.means();
    let radii: Vec<f64> = gmm.components().iter().map(|c| radius_sigmas * c.max_std()).collect();
    let mut histogram = vec![0; means.len()];
    let mut covered = vec![false; means.len()];
    for s in samples {
        check_dim(gmm.dim(), s.len(), "coverage sample")?;
        let (k, d2) = means
            .iter()
            .map(|m| m.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, d)| if d < best.1 { (k, d) } else { best });
        histogram[k] += 1;
        if d2.sqrt() <= radii[k] {
            covered[k] = true;
        }
    }
    let coverage = covered.iter().filter(|c| **c).count() as f64 / means.len() as f64;
    Ok(Coverage {
        coverage,
        histogram,
        covered,
    })
}

/// Oracle reference for one mixture: the 5th-percentile log-density
/// threshold and moments of a fixed-seed oracle draw.
#[derive(Debug, Clone)]
pub struct OracleReference {
    pub gmm: GaussianMixture,
    pub threshold: f64,
    pub moments: Moments,
    pub radius_sigmas: f64,
}

impl OracleReference {
    pub fn new(gmm: &GaussianMixture) -> Result<Self> {
        Self::with_draws(gmm, REFERENCE_DRAWS, REFERENCE_SEED)
    }

    pub fn with_draws(gmm: &GaussianMixture, draws: usize, seed: u64) -> Result<Self> {
        if draws < gmm.dim() + 1 {
            return Err(Error::precondition("too few reference draws"));
        }
        let mut r = rng::seeded(seed);
        let samples: Vec<SampleVec> = (0..draws).map(|_| gmm.draw(&mut r).0).collect();
        let mut logs = samples
            .iter()
            .map(|s| gmm.log_density(s))
            .collect::<Result<Vec<_>>>()?;
        logs.sort_by(f64::total_cmp);
        let threshold = logs[((draws as f64 * QUALITY_PERCENTILE) as usize).min(draws - 1)];
        Ok(Self {
            gmm: gmm.clone(),
            threshold,
            moments: Moments::fit(&samples)?,
            radius_sigmas: DEFAULT_RADIUS_SIGMAS,
        })
    }
}

/// `(mean log density, share of samples above the reference threshold)`.
pub fn density_stats_with(samples: &[SampleVec], reference: &OracleReference) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::precondition("density statistics need samples"));
    }
    let mut sum = 0.0;
    let mut above = 0usize;
    for s in samples {
        let l = reference.gmm.log_density(s)?;
        sum += l;
        above += usize::from(l > reference.threshold);
    }
    let n = samples.len() as f64;
    Ok((sum / n, above as f64 / n))
}

/// As [`density_stats_with`], building the reference for `gmm`.
pub fn density_stats(samples: &[SampleVec], gmm: &GaussianMixture) -> Result<(f64, f64)> {
    density_stats_with(samples, &OracleReference::new(gmm)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub frechet: f64,
    pub mode_coverage: f64,
    pub high_quality_fraction: f64,
    pub mean_log_density: f64,
    pub sample_count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "frechet,mode_coverage,high_quality_fraction,mean_log_density,sample_count";

    pub fn evaluate(samples: &[SampleVec], reference: &OracleReference) -> Result<Self> {
        let frechet = frechet_from_moments(&Moments::fit(samples)?, &reference.moments)?;
        let cov = mode_coverage(samples, &reference.gmm, reference.radius_sigmas)?;
        let (mean_log_density, high_quality_fraction) = density_stats_with(samples, reference)?;
        Ok(Self {
            frechet,
            mode_coverage: cov.coverage,
            high_quality_fraction,
            mean_log_density,
            sample_count: samples.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.10e},{:.10e},{:.10e},{:.10e},{}",
            self.frechet, self.mode_coverage, self.high_quality_fraction, self.mean_log_density, self.sample_count
        )
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("frechet", format!("{:.6}", self.frechet)),
            ("mode_coverage", format!("{:.4}", self.mode_coverage)),
            ("high_quality_fraction", format!("{:.4}", self.high_quality_fraction)),
            ("mean_log_density", format!("{:.6}", self.mean_log_density)),
            ("sample_count", self.sample_count.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<24}{v:>14}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::Preset;

    fn moments(mean: &[f64], diag: &[f64]) -> Moments {
        Moments {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let a = moments(&[0.0, 0.0], &[1.0, 1.0]);
        let b = moments(&[3.0, 0.0], &[1.0, 1.0]);
        assert!((frechet_from_moments(&a, &b).unwrap() - 9.0).abs() < 1e-12);
        let c = moments(&[0.0, 0.0], &[4.0, 1.0]);
        assert!((frechet_from_moments(&a, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let gmm = Preset::Ring8.mixture();
        let mut r = rng::seeded(2);
        let s: Vec<SampleVec> = (0..500).map(|_| gmm.draw(&mut r).0).collect();
        assert!(frechet_gaussian(&s, &s).unwrap().abs() < 1e-8);
        assert!(matches!(frechet_gaussian(&s[..2], &s), Err(Error::Precondition(_))));
    }

    #[test]
    fn coverage_examples() {
        let ring = Preset::Ring8.mixture();
        let m = ring.means();
        let one = vec![m[3].clone(); 50];
        let c = mode_coverage(&one, &ring, 3.0).unwrap();
        assert_eq!(c.coverage, 1.0 / 8.0);
        assert_eq!(c.histogram[3], 50);
        let grid = Preset::Grid25.mixture();
        assert_eq!(mode_coverage(&grid.means(), &grid, 3.0).unwrap().coverage, 1.0);
    }

    #[test]
    fn density_examples() {
        let ring = Preset::Ring8.mixture();
        let reference = OracleReference::new(&ring).unwrap();
        let mut r = rng::seeded(77);
        let s: Vec<SampleVec> = (0..20_000).map(|_| ring.draw(&mut r).0).collect();
        let (_, hq) = density_stats_with(&s, &reference).unwrap();
        assert!((hq - 0.95).abs() <= 0.02, "{hq}");
        let (_, hq) = density_stats_with(&[vec![0.0, 0.0]], &reference).unwrap();
        assert_eq!(hq, 0.0);
        assert!(density_stats_with(&[], &reference).is_err());
    }

    #[test]
    fn report_formats() {
        let r = MetricReport {
            frechet: 1.5,
            mode_coverage: 0.875,
            high_quality_fraction: 0.5,
            mean_log_density: -2.0,
            sample_count: 10,
        };
        assert_eq!(r.csv_row().split(',').count(), MetricReport::CSV_HEADER.split(',').count());
        assert!(r.table().contains("mode_coverage"));
    }
}
