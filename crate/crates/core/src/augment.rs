//! Score-guided mixing: mixup initialization, score-norm descent and a
//! single-step denoising finetune, plus batch augmentation at ratio `mu`.
//!
//! The audit sidecar "SMXA v1" has one line per augmented sample:
//!
//! ```text
//! SMXA 1 <count>
//! <parent_i> <parent_j> <lambda> <initial_score_norm> <final_score_norm> <steps_run>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::dataset::{fmt_f64, write_file, Dataset, Provenance};
use crate::error::{check_dim, Error, Result};
use crate::mlp::dot;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::score_net::ScoreNetwork;
use crate::synthetic::{GaussianMixture, SampleVec};

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_ETA: f64 = 0.005;
pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_T0: f64 = 0.25;
pub const DEFAULT_GRAD_TOL: f64 = 1e-3;
pub const DEFAULT_SUFFICIENT_DECREASE: f64 = 0.1;
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MixConfig {
    /// Beta(alpha, alpha) shape for the mixing weight.
    pub alpha: f64,
    /// Initial step size, decayed linearly to zero over `steps`.
    pub eta: f64,
    pub steps: usize,
    /// Remaining-noise fraction of the finetune scale.
    pub t0: f64,
    pub clamp01: bool,
    pub seed: u64,
    /// Fixed mixing weight instead of a Beta draw.
    pub lambda: Option<f64>,
    /// Stop once `|grad L| <= grad_tol`.
    pub grad_tol: f64,
    /// A trial step of size `eta` is accepted when it lowers `L` by at
    /// least `sufficient_decrease * eta * |grad L|^2`; otherwise `eta` is
    /// halved, up to [`MAX_HALVINGS`] times. Zero accepts any non-increase.
    pub sufficient_decrease: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            steps: DEFAULT_STEPS,
            t0: DEFAULT_T0,
            clamp01: false,
            seed: 0,
            lambda: None,
            grad_tol: DEFAULT_GRAD_TOL,
            sufficient_decrease: DEFAULT_SUFFICIENT_DECREASE,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::precondition(format!("alpha {} must be > 0", self.alpha)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::precondition(format!("eta {} must be > 0", self.eta)));
        }
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(Error::precondition(format!("t0 {} not in (0,1]", self.t0)));
        }
        if let Some(l) = self.lambda {
            check_lambda(l)?;
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::precondition("grad_tol must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.sufficient_decrease) {
            return Err(Error::precondition("sufficient_decrease must be in [0,1)"));
        }
        Ok(())
    }
}

/// Why the descent loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient norm fell below the tolerance.
    Converged,
    StepsExhausted,
    /// No halving of the step decreased the objective enough.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationRecord {
    /// Dataset indices of the parents, when built by [`augment_batch`].
    pub parents: Option<(usize, usize)>,
    pub x1: SampleVec,
    pub x2: SampleVec,
    pub lambda: f64,
    pub x_mixed: SampleVec,
    /// End of the descent, before the finetune.
    pub x_descended: SampleVec,
    pub x_star: SampleVec,
    /// `|S(x_mixed)|`.
    pub initial_score_norm: f64,
    /// `|S(x_descended)|`.
    pub final_score_norm: f64,
    pub steps_run: usize,
    pub termination: Termination,
    /// Objective value after each accepted step, starting with `L(x_mixed)`.
    pub objective_trace: Vec<f64>,
}

/// The field whose score norm is minimized.
#[derive(Debug, Clone, Copy)]
pub enum ScoreField<'a> {
    /// Trained network at its smallest noise scale; also drives the finetune.
    Learned(&'a ScoreNetwork),
    /// Exact mixture score; no finetune.
    Analytic(&'a GaussianMixture),
}

impl ScoreField<'_> {
    pub fn dim(&self) -> usize {
        match self {
            ScoreField::Learned(n) => n.dim(),
            ScoreField::Analytic(g) => g.dim(),
        }
    }

    pub fn score(&self, x: &[f64]) -> Result<SampleVec> {
        match self {
            ScoreField::Learned(n) => n.eval_score(x, n.num_scales()),
            ScoreField::Analytic(g) => g.analytic_score(x),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::precondition(format!("lambda {lambda} not in [0,1]")));
    }
    Ok(())
}

/// One draw from Beta(alpha, alpha).
pub fn sample_lambda(alpha: f64, seed: u64) -> Result<f64> {
    sample_lambda_with(alpha, &mut rng::seeded(seed))
}

pub fn sample_lambda_with(alpha: f64, rng: &mut rng::Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::precondition(format!("alpha {alpha} must be > 0")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::precondition(e.to_string()))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// `lambda x1 + (1 - lambda) x2`.
pub fn mixup(x1: &[f64], x2: &[f64], lambda: f64) -> Result<SampleVec> {
    check_dim(x1.len(), x2.len(), "mixup partner")?;
    check_lambda(lambda)?;
    Ok(x1
        .iter()
        .zip(x2)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect())
}

/// `L(x) = |S(x)|^2` and `grad L = 2 J^T S`.
pub fn score_norm_objective(field: ScoreField, x: &[f64]) -> Result<(f64, SampleVec)> {
    check_dim(field.dim(), x.len(), "objective input")?;
    let (s, jts) = match field {
        ScoreField::Learned(n) => n.eval_with_vjp(x, n.num_scales(), |s| s.to_vec())?,
        ScoreField::Analytic(g) => {
            // log p has a symmetric Hessian, so J^T S = H S.
            let s = g.analytic_score(x)?;
            let (_, hs) = g.score_and_hvp(x, &s)?;
            (s, hs)
        }
    };
    Ok((dot(&s, &s), jts.into_iter().map(|v| 2.0 * v).collect()))
}

fn clamp_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Full augmentation of one pair: mixup, descent on `|S|^2`, finetune.
pub fn scoremix(x1: &[f64], x2: &[f64], field: ScoreField, config: &MixConfig) -> Result<AugmentationRecord> {
    config.validate()?;
    check_dim(x1.len(), x2.len(), "scoremix partner")?;
    check_dim(field.dim(), x1.len(), "scoremix input")?;
    let lambda = match config.lambda {
        Some(l) => l,
        None => sample_lambda(config.alpha, config.seed)?,
    };
    let x_mixed = mixup(x1, x2, lambda)?;
    let mut x = x_mixed.clone();
    if config.clamp01 {
        clamp_unit(&mut x);
    }
    let (mut value, mut grad) = score_norm_objective(field, &x)?;
    let initial_score_norm = value.sqrt();
    let mut trace = vec![value];
    let mut termination = Termination::StepsExhausted;
    let mut steps_run = 0;
    for t in 0..config.steps {
        if norm(&grad) <= config.grad_tol {
            termination = Termination::Converged;
            break;
        }
        let mut eta = config.eta * (1.0 - t as f64 / config.steps as f64);
        let grad_sq = dot(&grad, &grad);
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut trial: Vec<f64> = x.iter().zip(&grad).map(|(xi, g)| xi - eta * g).collect();
            if config.clamp01 {
                clamp_unit(&mut trial);
            }
            if trial.iter().any(|v| !v.is_finite()) {
                return Err(Error::AugmentationDiverged { step: t });
            }
            let (v, g) = score_norm_objective(field, &trial)?;
            if !v.is_finite() || g.iter().any(|g| !g.is_finite()) {
                return Err(Error::AugmentationDiverged { step: t });
            }
            if v <= value - config.sufficient_decrease * eta * grad_sq {
                accepted = Some((trial, v, g));
                break;
            }
            eta *= 0.5;
        }
        let Some((trial, v, g)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        x = trial;
        value = v;
        grad = g;
        trace.push(value);
        steps_run = t + 1;
    }
    if termination == Termination::StepsExhausted && norm(&grad) <= config.grad_tol {
        termination = Termination::Converged;
    }
    let x_star = match field {
        ScoreField::Learned(net) => denoise_finetune(&x, net, config.t0, config.clamp01)?,
        ScoreField::Analytic(_) => x.clone(),
    };
    Ok(AugmentationRecord {
        parents: None,
        x1: x1.to_vec(),
        x2: x2.to_vec(),
        lambda,
        x_mixed,
        x_descended: x,
        x_star,
        initial_score_norm,
        final_score_norm: value.sqrt(),
        steps_run,
        termination,
        objective_trace: trace,
    })
}

/// Single denoising step `x + sigma_i0^2 S(x, sigma_i0)` at the scale
/// `t0` of the way from the smallest noise level back to the largest.
pub fn denoise_finetune(x: &[f64], net: &ScoreNetwork, t0: f64, clamp01: bool) -> Result<SampleVec> {
    check_dim(net.dim(), x.len(), "finetune input")?;
    denoise_step(x, net.schedule(), t0, clamp01, |x, i| net.eval_score(x, i))
}

fn denoise_step(
    x: &[f64],
    schedule: &NoiseSchedule,
    t0: f64,
    clamp01: bool,
    score: impl Fn(&[f64], usize) -> Result<SampleVec>,
) -> Result<SampleVec> {
    let i0 = schedule.index_for_fraction(t0)?;
    let s2 = schedule.weight(i0);
    let s = score(x, i0)?;
    let mut out: Vec<f64> = x.iter().zip(&s).map(|(x, s)| x + s2 * s).collect();
    if clamp01 {
        clamp_unit(&mut out);
    }
    Ok(out)
}

/// Augmented samples with their audit records, in generation order.
#[derive(Debug, Clone)]
pub struct AugmentedSet {
    pub dataset: Dataset,
    pub records: Vec<AugmentationRecord>,
}

/// `ceil(mu * n)`, tolerant of float noise in the product.
pub fn augmented_count(mu: f64, n: usize) -> Result<usize> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::precondition(format!("mu {mu} must be finite and >= 0")));
    }
    Ok((mu * n as f64 - 1e-9).ceil().max(0.0) as usize)
}

/// Draws `count` distinct-index pairs (within class when labelled); pair
/// `j` comes from stream `j` of `seed`.
fn draw_pairs(dataset: &Dataset, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::precondition(format!("augmentation needs >= 2 samples, got {n}")));
    }
    let classes: Option<Vec<Vec<usize>>> = dataset.labels().map(|labels| {
        let mut c = vec![Vec::new(); dataset.num_classes()];
        for (i, &l) in labels.iter().enumerate() {
            c[l].push(i);
        }
        c
    });
    if let Some(classes) = &classes {
        if let Some(k) = classes.iter().position(|c| c.len() == 1) {
            return Err(Error::precondition(format!(
                "class {k} has a single sample; within-class pairing needs two"
            )));
        }
    }
    Ok((0..count)
        .map(|j| {
            let mut r = rng::substream(seed, j as u64);
            let i = r.random_range(0..n);
            let pool: &[usize] = match (&classes, dataset.labels()) {
                (Some(c), Some(l)) => &c[l[i]],
                _ => &[],
            };
            let k = if pool.is_empty() {
                (i + r.random_range(1..n)) % n
            } else {
                let pos = pool.iter().position(|&p| p == i).unwrap();
                pool[(pos + r.random_range(1..pool.len())) % pool.len()]
            };
            (i, k)
        })
        .collect())
}

fn assemble(dataset: &Dataset, pairs: &[(usize, usize)], samples: Vec<SampleVec>, seed: u64) -> Result<Dataset> {
    let labels = dataset
        .labels()
        .map(|l| pairs.iter().map(|&(i, _)| l[i]).collect());
    Dataset::new(dataset.dim(), samples, labels, Provenance::Augmented { seed })
}

/// `ceil(mu * |dataset|)` ScoreMix samples from random distinct pairs.
pub fn augment_batch(
    dataset: &Dataset,
    field: ScoreField,
    config: &MixConfig,
    mu: f64,
    seed: u64,
) -> Result<AugmentedSet> {
    config.validate()?;
    check_dim(field.dim(), dataset.dim(), "score field")?;
    let count = augmented_count(mu, dataset.len())?;
    let pairs = draw_pairs(dataset, count, seed)?;
    let mut records = Vec::with_capacity(count);
    for (j, &(i, k)) in pairs.iter().enumerate() {
        let cfg = MixConfig {
            seed: rng::derive_seed(seed, j as u64),
            ..config.clone()
        };
        let mut rec = scoremix(&dataset.samples()[i], &dataset.samples()[k], field, &cfg)?;
        rec.parents = Some((i, k));
        records.push(rec);
    }
    let samples = records.iter().map(|r| r.x_star.clone()).collect();
    Ok(AugmentedSet {
        dataset: assemble(dataset, &pairs, samples, seed)?,
        records,
    })
}

/// Plain-mixup baseline: `ceil(mu * |dataset|)` interpolants, same pairing.
pub fn mixup_batch(dataset: &Dataset, alpha: f64, mu: f64, seed: u64) -> Result<Dataset> {
    let count = augmented_count(mu, dataset.len())?;
    let pairs = draw_pairs(dataset, count, seed)?;
    let samples = pairs
        .iter()
        .enumerate()
        .map(|(j, &(i, k))| {
            let lambda = sample_lambda(alpha, rng::derive_seed(seed, j as u64))?;
            mixup(&dataset.samples()[i], &dataset.samples()[k], lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(dataset, &pairs, samples, seed)
}

/// One SMXA line.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub parents: (usize, usize),
    pub lambda: f64,
    pub initial_score_norm: f64,
    pub final_score_norm: f64,
    pub steps_run: usize,
}

impl From<&AugmentationRecord> for AuditRow {
    fn from(r: &AugmentationRecord) -> Self {
        Self {
            parents: r.parents.unwrap_or((0, 0)),
            lambda: r.lambda,
            initial_score_norm: r.initial_score_norm,
            final_score_norm: r.final_score_norm,
            steps_run: r.steps_run,
        }
    }
}

pub fn to_smxa(rows: &[AuditRow]) -> String {
    let mut out = format!("SMXA 1 {}\n", rows.len());
    for r in rows {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            r.parents.0,
            r.parents.1,
            fmt_f64(r.lambda),
            fmt_f64(r.initial_score_norm),
            fmt_f64(r.final_score_norm),
            r.steps_run
        );
    }
    out
}

pub fn from_smxa(text: &str, path: &Path) -> Result<Vec<AuditRow>> {
    let err = |m: String| Error::parse(path, m);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
    if header.len() != 3 || header[0] != "SMXA" || header[1] != "1" {
        return Err(err("bad SMXA header".into()));
    }
    let count: usize = header[2].parse().map_err(|_| err("bad count".into()))?;
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 6 {
                return Err(err(format!("line {}: expected 6 fields, got {}", n + 2, t.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("line {}: {e}", n + 2)));
            let real = |s: &str| s.parse::<f64>().map_err(|e| err(format!("line {}: {e}", n + 2)));
            Ok(AuditRow {
                parents: (int(t[0])?, int(t[1])?),
                lambda: real(t[2])?,
                initial_score_norm: real(t[3])?,
                final_score_norm: real(t[4])?,
                steps_run: int(t[5])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() != count {
        return Err(err(format!("header declares {count} rows, found {}", rows.len())));
    }
    Ok(rows)
}

pub fn save_smxa(path: &Path, records: &[AugmentationRecord]) -> Result<()> {
    let rows: Vec<AuditRow> = records.iter().map(AuditRow::from).collect();
    write_file(path, &to_smxa(&rows))
}

pub fn load_smxa(path: &Path) -> Result<Vec<AuditRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_smxa(&text, path)
}
