//! Gaussian-mixture data sources with exact log-densities and Stein scores.
//!
//! These mixtures are the ground truth for everything downstream: score
//! network fidelity, density gain of augmented samples and GAN evaluation.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;

use crate::dataset::{Dataset, Provenance};
use crate::error::{check_dim, Error, Result};
use crate::rng;

/// Ordered real coordinates of one data point.
pub type SampleVec = Vec<f64>;

/// Standard deviation of each ring8 mode.
pub const RING8_STD: f64 = 0.1;
pub const RING8_RADIUS: f64 = 4.0;
/// Standard deviation of each grid25 mode.
pub const GRID25_STD: f64 = 0.05;
pub const GAUSS1_DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Gaussian {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(weight: f64, mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::schema("component mean must have dimension >= 1"));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::schema(format!(
                "covariance is {}x{}, mean has dimension {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::schema(format!("component weight {weight} not in (0,1]")));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::schema("non-finite mean or covariance entry"));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::schema("covariance is not symmetric"));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::schema("covariance is not positive definite"))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            weight,
            mean: DVector::from_vec(mean),
            cov,
            chol,
            precision,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn isotropic(weight: f64, mean: Vec<f64>, std: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(weight, mean, DMatrix::identity(d, d) * (std * std))
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Largest per-axis standard deviation.
    pub fn max_std(&self) -> f64 {
        self.cov.diagonal().iter().fold(0.0f64, |m, v| m.max(*v)).sqrt()
    }

    fn log_pdf_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let diff = x - &self.mean;
        let grad = -(&self.precision * &diff);
        let maha = -diff.dot(&grad);
        (self.log_norm - 0.5 * maha, grad)
    }
}

/// Finite mixture of full-covariance Gaussians.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<Gaussian>,
    unit_box: bool,
}

impl GaussianMixture {
    pub fn new(components: Vec<Gaussian>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::schema("mixture needs at least one component"));
        };
        let d = first.dim();
        for c in &components {
            check_dim(d, c.dim(), "mixture component")?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::schema(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self {
            components,
            unit_box: false,
        })
    }

    pub fn single(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![Gaussian::new(1.0, mean, cov)?])
    }

    /// Marks the mixture as living in `[0,1]^d`: draws are rejected per
    /// component until they fall inside the box.
    pub fn with_unit_box(mut self) -> Self {
        self.unit_box = true;
        self
    }

    pub fn is_unit_box(&self) -> bool {
        self.unit_box
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn means(&self) -> Vec<SampleVec> {
        self.components.iter().map(|c| c.mean().to_vec()).collect()
    }

    /// The mixture convolved with `N(0, sigma^2 I)`.
    pub fn convolved(&self, sigma: f64) -> Result<Self> {
        let d = self.dim();
        let components = self
            .components
            .iter()
            .map(|c| {
                Gaussian::new(
                    c.weight,
                    c.mean().to_vec(),
                    &c.cov + DMatrix::identity(d, d) * (sigma * sigma),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            components,
            unit_box: false,
        })
    }

    /// Per-component log terms `log w_k + log N(x; mu_k, Sigma_k)` and score terms.
    fn terms(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
        check_dim(self.dim(), x.len(), "log_density input")?;
        let xv = DVector::from_column_slice(x);
        let (logs, grads) = self
            .components
            .iter()
            .map(|c| {
                let (lp, g) = c.log_pdf_and_grad(&xv);
                (c.weight.ln() + lp, g)
            })
            .unzip();
        Ok((logs, grads))
    }

    fn responsibilities(logs: &[f64]) -> (f64, Vec<f64>) {
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let (logs, _) = self.terms(x)?;
        Ok(Self::responsibilities(&logs).0)
    }

    /// Exact `grad_x log p(x)`: responsibility-weighted sum of `-P_k (x - mu_k)`.
    pub fn analytic_score(&self, x: &[f64]) -> Result<SampleVec> {
        let (logs, grads) = self.terms(x)?;
        let (_, resp) = Self::responsibilities(&logs);
        let mut out = DVector::zeros(self.dim());
        for (r, g) in resp.iter().zip(&grads) {
            out.axpy(*r, g, 1.0);
        }
        Ok(out.as_slice().to_vec())
    }

    /// Score together with the Hessian-vector product `H v` of `log p` at `x`.
    ///
    /// `H = sum_k r_k (g_k g_k^T - P_k) - s s^T` with `g_k` the component
    /// scores and `s` the mixture score.
    pub fn score_and_hvp(&self, x: &[f64], v: &[f64]) -> Result<(SampleVec, SampleVec)> {
        check_dim(self.dim(), v.len(), "Hessian-vector direction")?;
        let (logs, grads) = self.terms(x)?;
        let (_, resp) = Self::responsibilities(&logs);
        let vv = DVector::from_column_slice(v);
        let mut score = DVector::zeros(self.dim());
        let mut hv = DVector::zeros(self.dim());
        for ((r, g), c) in resp.iter().zip(&grads).zip(&self.components) {
            score.axpy(*r, g, 1.0);
            hv.axpy(*r * g.dot(&vv), g, 1.0);
            hv -= (&c.precision * &vv) * *r;
        }
        let sv = score.dot(&vv);
        hv.axpy(-sv, &score, 1.0);
        Ok((score.as_slice().to_vec(), hv.as_slice().to_vec()))
    }

    /// Closed-form score of the single Gaussian perturbed by `N(0, sigma^2 I)`:
    /// `-(Sigma + sigma^2 I)^{-1} (x - mu)`.
    pub fn perturbed_score(&self, x: &[f64], sigma: f64) -> Result<SampleVec> {
        if self.components.len() != 1 {
            return Err(Error::Unsupported(format!(
                "perturbed_score needs a single Gaussian, got {} components",
                self.components.len()
            )));
        }
        check_dim(self.dim(), x.len(), "perturbed_score input")?;
        if !(sigma > 0.0) {
            return Err(Error::precondition(format!("sigma must be positive, got {sigma}")));
        }
        let c = &self.components[0];
        let d = self.dim();
        let inflated = &c.cov + DMatrix::identity(d, d) * (sigma * sigma);
        let chol = Cholesky::new(inflated)
            .ok_or_else(|| Error::schema("perturbed covariance is not positive definite"))?;
        let diff = DVector::from_column_slice(x) - &c.mean;
        Ok((-chol.solve(&diff)).as_slice().to_vec())
    }

    /// One draw and its component index.
    pub fn draw(&self, rng: &mut rng::Rng) -> (SampleVec, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        loop {
            let z = DVector::from_vec(rng::standard_normal_vec(rng, self.dim()));
            let x = &c.mean + c.chol.l_dirty().lower_triangle() * z;
            if !self.unit_box || x.iter().all(|v| (0.0..=1.0).contains(v)) {
                return (x.as_slice().to_vec(), k);
            }
        }
    }
}

/// `count` i.i.d. draws labelled with their component index.
pub fn sample_gmm(gmm: &GaussianMixture, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::precondition("sample count must be >= 1"));
    }
    let mut rng = rng::seeded(seed);
    let (samples, labels): (Vec<_>, Vec<_>) = (0..count).map(|_| gmm.draw(&mut rng)).unzip();
    Dataset::new(
        gmm.dim(),
        samples,
        Some(labels),
        Provenance::Synthetic {
            gmm: Box::new(gmm.clone()),
            seed,
        },
    )
}

/// Shipped toy distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preset {
    /// 5x5 grid of isotropic modes inside the unit square.
    Grid25,
    /// Eight modes evenly spaced on a circle of radius 4.
    Ring8,
    /// One isotropic Gaussian `N(0, tau^2 I_dim)`.
    Gauss1 { tau: f64, dim: usize },
}

impl Preset {
    pub fn mixture(&self) -> GaussianMixture {
        match *self {
            Preset::Grid25 => {
                let comps = (0..25)
                    .map(|k| {
                        let (i, j) = (k / 5, k % 5);
                        let mean = vec![0.1 + 0.2 * i as f64, 0.1 + 0.2 * j as f64];
                        Gaussian::isotropic(0.04, mean, GRID25_STD).expect("valid preset")
                    })
                    .collect();
                GaussianMixture::new(comps).expect("valid preset").with_unit_box()
            }
            Preset::Ring8 => {
                let comps = (0..8)
                    .map(|k| {
                        let angle = TAU * k as f64 / 8.0;
                        let mean = vec![RING8_RADIUS * angle.cos(), RING8_RADIUS * angle.sin()];
                        Gaussian::isotropic(0.125, mean, RING8_STD).expect("valid preset")
                    })
                    .collect();
                GaussianMixture::new(comps).expect("valid preset")
            }
            Preset::Gauss1 { tau, dim } => GaussianMixture::new(vec![Gaussian::isotropic(
                1.0,
                vec![0.0; dim],
                tau,
            )
            .expect("valid preset")])
            .expect("valid preset"),
        }
    }

    /// Whether iterates on this data should be clamped to `[0,1]`.
    pub fn range_bounded(&self) -> bool {
        matches!(self, Preset::Grid25)
    }

    /// Per-axis standard deviation of a mode, used as the coverage unit.
    pub fn mode_std(&self) -> f64 {
        match *self {
            Preset::Grid25 => GRID25_STD,
            Preset::Ring8 => RING8_STD,
            Preset::Gauss1 { tau, .. } => tau,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Grid25 => f.write_str("grid25"),
            Preset::Ring8 => f.write_str("ring8"),
            Preset::Gauss1 { .. } => f.write_str("gauss1"),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    /// `grid25`, `ring8`, `gauss1` (tau 0.5, 2-D) or `gauss1:<tau>[:<dim>]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let bad = || Error::schema(format!("unknown preset '{s}'"));
        let preset = match name {
            "grid25" => Preset::Grid25,
            "ring8" => Preset::Ring8,
            "gauss1" => {
                let tau = match parts.next() {
                    Some(t) => t.parse::<f64>().map_err(|_| bad())?,
                    None => GAUSS1_DEFAULT_TAU,
                };
                let dim = match parts.next() {
                    Some(t) => t.parse::<usize>().map_err(|_| bad())?,
                    None => 2,
                };
                if !(tau > 0.0) || dim == 0 {
                    return Err(bad());
                }
                Preset::Gauss1 { tau, dim }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(preset)
    }
}
