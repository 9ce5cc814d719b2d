//! Noise-conditional score network and multi-scale denoising score matching.
//!
//! The network is a softplus MLP `d -> widths... -> d`. Each hidden layer's
//! pre-activation is modulated per noise scale by learned gain/shift tables,
//! either one table per scale or a few knots interpolated in `sigma`. An
//! optional per-table log gain rescales the output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::adam::Adam;
use crate::dataset::{write_file, write_floats, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::mlp::{ForwardCache, MlpLayout, Modulation};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::synthetic::SampleVec;

pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

/// Post-multiplier applied to the raw network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputScaling {
    /// `S = f(x, i)`.
    #[default]
    Identity,
    /// `S = f(x, i) / sigma_i`.
    InverseSigma,
}

pub const DEFAULT_KNOTS: usize = 4;

/// How the gain/shift tables are indexed by noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleTables {
    /// One independent table per scale.
    PerScale,
    /// `k` tables at evenly spaced noise levels between `sigma_N` and
    /// `sigma_1`, linearly interpolated in `sigma`.
    Knots(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArch {
    pub hidden_widths: Vec<usize>,
    pub output: OutputScaling,
    /// Append the normalized `log sigma` to the network input.
    pub sigma_input: bool,
    pub tables: ScaleTables,
    /// Learn a per-table log output gain.
    pub output_gain: bool,
}

impl Default for ScaleTables {
    fn default() -> Self {
        Self::Knots(DEFAULT_KNOTS)
    }
}

impl Default for ScoreArch {
    fn default() -> Self {
        Self {
            hidden_widths: DEFAULT_HIDDEN.to_vec(),
            output: OutputScaling::default(),
            sigma_input: false,
            tables: ScaleTables::default(),
            output_gain: true,
        }
    }
}

impl ScoreArch {
    pub fn with_widths(hidden_widths: &[usize]) -> Self {
        Self {
            hidden_widths: hidden_widths.to_vec(),
            ..Self::default()
        }
    }

    /// Conditioning options as `key=value` tokens (widths excluded).
    fn to_tokens(&self) -> String {
        let output = match self.output {
            OutputScaling::Identity => "identity",
            OutputScaling::InverseSigma => "inverse_sigma",
        };
        let tables = match self.tables {
            ScaleTables::PerScale => "per_scale".to_string(),
            ScaleTables::Knots(k) => format!("knots:{k}"),
        };
        format!(
            "output={output} sigma_input={} tables={tables} output_gain={}",
            u8::from(self.sigma_input),
            u8::from(self.output_gain)
        )
    }

    fn parse_tokens(&mut self, tokens: &str) -> std::result::Result<(), String> {
        let flag = |v: &str| match v {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(format!("bad flag '{v}'")),
        };
        for tok in tokens.split_whitespace() {
            let (key, value) = tok.split_once('=').ok_or_else(|| format!("bad arch token '{tok}'"))?;
            match key {
                "output" => {
                    self.output = match value {
                        "identity" => OutputScaling::Identity,
                        "inverse_sigma" => OutputScaling::InverseSigma,
                        _ => return Err(format!("unknown output scaling '{value}'")),
                    }
                }
                "sigma_input" => self.sigma_input = flag(value)?,
                "output_gain" => self.output_gain = flag(value)?,
                "tables" => {
                    self.tables = match value.strip_prefix("knots:") {
                        Some(k) => ScaleTables::Knots(
                            k.parse().ok().filter(|k| *k >= 2).ok_or_else(|| format!("bad knot count '{k}'"))?,
                        ),
                        None if value == "per_scale" => ScaleTables::PerScale,
                        None => return Err(format!("unknown table layout '{value}'")),
                    }
                }
                _ => return Err(format!("unknown arch key '{key}'")),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    dim: usize,
    arch: ScoreArch,
    layout: MlpLayout,
    theta: Vec<f64>,
    schedule: NoiseSchedule,
    table_offset: usize,
    /// Gain/shift offsets of each hidden layer within one table.
    table_layers: Vec<(usize, usize)>,
    table_len: usize,
    mod_len: usize,
}

/// Gain/shift tables for `tables` over a schedule of `scales` levels.
fn table_count(tables: ScaleTables, scales: usize) -> usize {
    match tables {
        ScaleTables::PerScale => scales,
        ScaleTables::Knots(k) => k.clamp(2, scales),
    }
}

impl ScoreNetwork {
    /// Glorot-uniform weights, zero biases, unit gains and zero shifts.
    pub fn new(dim: usize, hidden_widths: &[usize], schedule: NoiseSchedule, seed: u64) -> Self {
        Self::with_arch(dim, ScoreArch::with_widths(hidden_widths), schedule, seed)
    }

    pub fn with_arch(dim: usize, arch: ScoreArch, schedule: NoiseSchedule, seed: u64) -> Self {
        let mut sizes = vec![dim + usize::from(arch.sigma_input)];
        sizes.extend_from_slice(&arch.hidden_widths);
        sizes.push(dim);
        let layout = MlpLayout::new(sizes);
        let mut table_layers = Vec::new();
        let mut off = 0;
        for w in &arch.hidden_widths {
            table_layers.push((off, off + w));
            off += 2 * w;
        }
        let mod_len = off;
        let table_len = off + usize::from(arch.output_gain);
        let n_tables = table_count(arch.tables, schedule.len());
        let table_offset = layout.num_params();
        let mut theta = vec![0.0; table_offset + table_len * n_tables];
        layout.init(&mut theta, &mut rng::seeded(seed));
        for t in 0..n_tables {
            let base = table_offset + t * table_len;
            for (&(g, _), w) in table_layers.iter().zip(&arch.hidden_widths) {
                theta[base + g..base + g + w].fill(1.0);
            }
        }
        Self {
            dim,
            arch,
            layout,
            theta,
            schedule,
            table_offset,
            table_layers,
            table_len,
            mod_len,
        }
    }

    fn n_tables(&self) -> usize {
        table_count(self.arch.tables, self.schedule.len())
    }

    /// Tables contributing to 1-based `scale`, with interpolation weights.
    fn table_weights(&self, scale: usize) -> [(usize, f64); 2] {
        match self.arch.tables {
            ScaleTables::PerScale => [(scale - 1, 1.0), (scale - 1, 0.0)],
            ScaleTables::Knots(_) => {
                let k = self.n_tables();
                let (hi, lo) = (self.schedule.largest(), self.schedule.smallest());
                let pos = (hi - self.schedule.sigma(scale)) / (hi - lo) * (k - 1) as f64;
                let lo = (pos.floor() as usize).min(k - 2);
                let frac = pos - lo as f64;
                [(lo, 1.0 - frac), (lo + 1, frac)]
            }
        }
    }

    /// Effective gain/shift values for `scale`.
    fn modulation_values(&self, scale: usize) -> Vec<f64> {
        let mut values = vec![0.0; self.table_len];
        for (t, w) in self.table_weights(scale) {
            if w != 0.0 {
                let base = self.table_offset + t * self.table_len;
                crate::mlp::axpy(w, &self.theta[base..base + self.table_len], &mut values);
            }
        }
        values
    }

    fn scatter_modulation_grad(&self, scale: usize, grad_mod: &[f64], grad: &mut [f64]) {
        for (t, w) in self.table_weights(scale) {
            if w != 0.0 {
                let base = self.table_offset + t * self.table_len;
                crate::mlp::axpy(w, grad_mod, &mut grad[base..base + self.table_len]);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arch(&self) -> &ScoreArch {
        &self.arch
    }

    pub fn hidden_widths(&self) -> &[usize] {
        self.layout.hidden_widths()
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn num_scales(&self) -> usize {
        self.schedule.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Offset of the first gain/shift table inside the parameter vector.
    pub fn table_offset(&self) -> usize {
        self.table_offset
    }

    fn check(&self, x: &[f64], scale: usize) -> Result<()> {
        check_dim(self.dim, x.len(), "score network input")?;
        self.schedule.check_index(scale)
    }

    fn net_input(&self, x: &[f64], scale: usize) -> Vec<f64> {
        let mut v = x.to_vec();
        if self.arch.sigma_input {
            let (hi, lo) = (self.schedule.largest().ln(), self.schedule.smallest().ln());
            v.push((2.0 * self.schedule.sigma(scale).ln() - hi - lo) / (hi - lo));
        }
        v
    }

    fn output_factor(&self, scale: usize, values: &[f64]) -> f64 {
        let base = match self.arch.output {
            OutputScaling::Identity => 1.0,
            OutputScaling::InverseSigma => 1.0 / self.schedule.sigma(scale),
        };
        if self.arch.output_gain {
            base * values[self.mod_len].exp()
        } else {
            base
        }
    }

    fn forward(&self, x: &[f64], scale: usize, values: &[f64], cache: &mut ForwardCache) {
        let m = Modulation {
            values,
            offsets: &self.table_layers,
        };
        self.layout
            .forward_into(&self.theta, &self.net_input(x, scale), Some(m), cache);
    }

    /// `S_theta(x, sigma_scale)`.
    pub fn eval_score(&self, x: &[f64], scale: usize) -> Result<SampleVec> {
        self.check(x, scale)?;
        let values = self.modulation_values(scale);
        let mut cache = ForwardCache::default();
        self.forward(x, scale, &values, &mut cache);
        let k = self.output_factor(scale, &values);
        Ok(cache.output.iter().map(|v| v * k).collect())
    }

    /// `J^T cotangent` with `J = dS_theta(x, sigma)/dx`.
    pub fn eval_score_input_grad(&self, x: &[f64], scale: usize, cotangent: &[f64]) -> Result<SampleVec> {
        check_dim(self.dim, cotangent.len(), "cotangent")?;
        Ok(self.eval_with_vjp(x, scale, |_| cotangent.to_vec())?.1)
    }

    /// Score and the input VJP for a cotangent computed from that score.
    pub fn eval_with_vjp(
        &self,
        x: &[f64],
        scale: usize,
        cotangent: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Result<(SampleVec, SampleVec)> {
        self.check(x, scale)?;
        let values = self.modulation_values(scale);
        let mut cache = ForwardCache::default();
        self.forward(x, scale, &values, &mut cache);
        let k = self.output_factor(scale, &values);
        let score: Vec<f64> = cache.output.iter().map(|v| v * k).collect();
        let cot: Vec<f64> = cotangent(&score).into_iter().map(|c| c * k).collect();
        let m = Modulation {
            values: &values,
            offsets: &self.table_layers,
        };
        let mut gx = self.layout.backward(&self.theta, &cache, &cot, Some(m), None, None);
        gx.truncate(self.dim);
        Ok((score, gx))
    }

    /// SMXN v1 text:
    ///
    /// ```text
    /// SMXN 1 <d> <n_scales> <hidden widths...>
    /// arch output=<identity|inverse_sigma> sigma_input=<0|1> tables=<per_scale|knots:K> output_gain=<0|1>
    /// sigmas <sigma_1> ... <sigma_N>
    /// params <P>
    /// <one parameter per line>
    /// ```
    ///
    /// Parameters follow the MLP order (per layer: row-major weights, then
    /// biases), then each table in turn: per hidden layer its gains and
    /// shifts, then the log output gain when enabled.
    pub fn to_smxn(&self) -> String {
        let mut out = format!("SMXN 1 {} {}", self.dim(), self.num_scales());
        for w in self.hidden_widths() {
            let _ = write!(out, " {w}");
        }
        let _ = write!(out, "\narch {}", self.arch.to_tokens());
        out.push_str("\nsigmas ");
        write_floats(&mut out, self.schedule.sigmas());
        let _ = write!(out, "\nparams {}\n", self.theta.len());
        for v in &self.theta {
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    pub fn from_smxn(text: &str, path: &Path) -> Result<Self> {
        let err = |m: String| Error::parse(path, m);
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
        if header.len() < 4 || header[0] != "SMXN" || header[1] != "1" {
            return Err(err("bad SMXN header".into()));
        }
        let nums = header[2..]
            .iter()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err("bad SMXN header field".into()))?;
        let (dim, n_scales, widths) = (nums[0], nums[1], &nums[2..]);
        if dim == 0 || widths.contains(&0) {
            return Err(err("zero-sized layer in header".into()));
        }
        let mut arch = ScoreArch::with_widths(widths);
        let arch_line = lines.next().unwrap_or_default();
        arch.parse_tokens(arch_line.strip_prefix("arch ").ok_or_else(|| err("missing arch line".into()))?)
            .map_err(err)?;
        let sig_line = lines.next().unwrap_or_default();
        let sigmas = sig_line
            .strip_prefix("sigmas ")
            .ok_or_else(|| err("missing sigmas line".into()))?
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(format!("bad sigma: {e}")))?;
        if sigmas.len() != n_scales {
            return Err(err(format!("header declares {n_scales} scales, found {}", sigmas.len())));
        }
        let schedule = NoiseSchedule::from_sigmas(sigmas)?;
        let n_params: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("params "))
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| err("missing params line".into()))?;
        let theta = lines
            .filter(|l| !l.trim().is_empty())
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(format!("bad parameter: {e}")))?;
        let mut net = ScoreNetwork::with_arch(dim, arch, schedule, 0);
        if n_params != net.theta.len() || theta.len() != n_params {
            return Err(err(format!(
                "architecture needs {} parameters, header says {n_params}, file has {}",
                net.theta.len(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite parameter".into()));
        }
        net.theta = theta;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_smxn())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_smxn(&text, path)
    }
}

/// How the noise scale of each DSM term is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleSampling {
    /// One scale per batch element, uniform over `1..=N`.
    #[default]
    Uniform,
    /// Every scale for every element, averaged over scales.
    AllScales,
}

/// One DSM term: clean sample `index`, noise scale and standard-normal draw.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub index: usize,
    pub scale: usize,
    pub noise: Vec<f64>,
}

/// Noise draws for a batch; stream `b` of `seed` serves element `b`.
pub fn draw_perturbations(
    batch_len: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    sampling: ScaleSampling,
) -> Vec<Perturbation> {
    let n = schedule.len();
    (0..batch_len)
        .flat_map(|b| {
            let mut r = rng::substream(seed, b as u64);
            let scales: Vec<usize> = match sampling {
                ScaleSampling::Uniform => vec![r.random_range(1..=n)],
                ScaleSampling::AllScales => (1..=n).collect(),
            };
            scales
                .into_iter()
                .map(|scale| Perturbation {
                    index: b,
                    scale,
                    noise: rng::standard_normal_vec(&mut r, dim),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn perturbation_weight(sampling: ScaleSampling, batch_len: usize, n_scales: usize) -> f64 {
    match sampling {
        ScaleSampling::Uniform => 1.0 / batch_len as f64,
        ScaleSampling::AllScales => 1.0 / (batch_len * n_scales) as f64,
    }
}

/// Weighted DSM loss of an arbitrary estimator `(clean, noisy, scale) -> S`.
///
/// Each term is `sigma^2 |S(x~, sigma) + (x~ - x)/sigma^2|^2` with
/// `x~ = x + sigma z`; the loss is the batch mean.
pub fn dsm_loss_with(
    batch: &[SampleVec],
    schedule: &NoiseSchedule,
    seed: u64,
    sampling: ScaleSampling,
    mut estimator: impl FnMut(&[f64], &[f64], usize) -> Vec<f64>,
) -> Result<f64> {
    let Some(first) = batch.first() else {
        return Err(Error::precondition("DSM batch is empty"));
    };
    let d = first.len();
    let weight = perturbation_weight(sampling, batch.len(), schedule.len());
    let mut loss = 0.0;
    for p in draw_perturbations(batch.len(), d, schedule, seed, sampling) {
        let clean = &batch[p.index];
        check_dim(d, clean.len(), "DSM batch element")?;
        let sigma = schedule.sigma(p.scale);
        let noisy: Vec<f64> = clean.iter().zip(&p.noise).map(|(x, z)| x + sigma * z).collect();
        let s = estimator(clean, &noisy, p.scale);
        let sq: f64 = s.iter().zip(&p.noise).map(|(s, z)| (s + z / sigma).powi(2)).sum();
        loss += weight * sigma * sigma * sq;
    }
    Ok(loss)
}

/// Weighted multi-scale DSM loss and its exact parameter gradient.
pub fn dsm_loss(
    net: &ScoreNetwork,
    batch: &[SampleVec],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; net.num_params()];
    let loss = dsm_loss_into(net, batch, schedule, seed, ScaleSampling::Uniform, &mut grad)?;
    Ok((loss, grad))
}

/// As [`dsm_loss`], accumulating the gradient into a caller-zeroed buffer.
pub fn dsm_loss_into(
    net: &ScoreNetwork,
    batch: &[SampleVec],
    schedule: &NoiseSchedule,
    seed: u64,
    sampling: ScaleSampling,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::precondition("DSM batch is empty"));
    }
    if schedule.len() != net.num_scales() {
        return Err(Error::schema(format!(
            "schedule has {} scales, network was built for {}",
            schedule.len(),
            net.num_scales()
        )));
    }
    let d = net.dim();
    for x in batch {
        check_dim(d, x.len(), "DSM batch element")?;
    }
    let weight = perturbation_weight(sampling, batch.len(), schedule.len());
    let mut loss = 0.0;
    let mut cache = ForwardCache::default();
    let mut noisy = vec![0.0; d];
    let mut residual = vec![0.0; d];
    let mut grad_mod = vec![0.0; net.table_len];
    for p in draw_perturbations(batch.len(), d, schedule, seed, sampling) {
        let sigma = schedule.sigma(p.scale);
        for ((n, x), z) in noisy.iter_mut().zip(&batch[p.index]).zip(&p.noise) {
            *n = x + sigma * z;
        }
        let values = net.modulation_values(p.scale);
        net.forward(&noisy, p.scale, &values, &mut cache);
        let w = weight * sigma * sigma;
        let k = net.output_factor(p.scale, &values);
        for ((r, s), z) in residual.iter_mut().zip(&cache.output).zip(&p.noise) {
            *r = k * s + z / sigma;
        }
        loss += w * residual.iter().map(|r| r * r).sum::<f64>();
        grad_mod.fill(0.0);
        if net.arch.output_gain {
            grad_mod[net.mod_len] = 2.0 * w * k * crate::mlp::dot(&residual, &cache.output);
        }
        for r in &mut residual {
            *r *= 2.0 * w * k;
        }
        let m = Modulation {
            values: &values,
            offsets: &net.table_layers,
        };
        net.layout.backward(&net.theta, &cache, &residual, Some(m), Some(&mut *grad), Some(&mut grad_mod));
        net.scatter_modulation_grad(p.scale, &grad_mod, grad);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub arch: ScoreArch,
    pub scale_sampling: ScaleSampling,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            steps: 20_000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            arch: ScoreArch::default(),
            scale_sampling: ScaleSampling::Uniform,
        }
    }
}

impl ScoreTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::precondition("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::precondition("batch_size must be >= 1"));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::precondition(format!("Adam beta {b} not in (0,1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::precondition("adam_epsilon must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScoreTraining {
    pub network: ScoreNetwork,
    /// Minibatch loss at every step.
    pub losses: Vec<f64>,
}

impl ScoreTraining {
    /// Mean of the first and last `window` losses.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }

    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{},{l:.16e}", i + 1);
        }
        out
    }
}

/// Adam on minibatch DSM losses; minibatches drawn uniformly with replacement.
pub fn train_scorenet(
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    config: &ScoreTrainConfig,
) -> Result<ScoreTraining> {
    train_scorenet_with(dataset, schedule, config, |_, _| {})
}

/// As [`train_scorenet`], calling `progress(step, loss)` after each step.
pub fn train_scorenet_with(
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    config: &ScoreTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<ScoreTraining> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::precondition("cannot train a score network on an empty dataset"));
    }
    let mut net = ScoreNetwork::with_arch(
        dataset.dim(),
        config.arch.clone(),
        schedule.clone(),
        rng::derive_seed(config.seed, 0),
    );
    let mut adam = Adam::new(
        net.num_params(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    );
    let batch_seed = rng::derive_seed(config.seed, 1);
    let noise_seed = rng::derive_seed(config.seed, 2);
    let mut grad = vec![0.0; net.num_params()];
    let mut losses = Vec::with_capacity(config.steps);
    let mut batch: Vec<SampleVec> = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        let mut r = rng::substream(batch_seed, step as u64);
        batch.clear();
        batch.extend(
            (0..config.batch_size).map(|_| dataset.samples()[r.random_range(0..dataset.len())].clone()),
        );
        grad.fill(0.0);
        let loss = dsm_loss_into(
            &net,
            &batch,
            schedule,
            rng::derive_seed(noise_seed, step as u64),
            config.scale_sampling,
            &mut grad,
        )?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { step });
        }
        adam.step(&mut net.theta, &grad);
        if net.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { step });
        }
        losses.push(loss);
        progress(step, loss);
    }
    Ok(ScoreTraining { network: net, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64) -> ScoreNetwork {
        small_net_with(seed, ScoreArch::with_widths(&[6, 5]))
    }

    fn small_net_with(seed: u64, arch: ScoreArch) -> ScoreNetwork {
        let schedule = NoiseSchedule::from_endpoints(1.0, 0.1, 0.8).unwrap();
        let mut net = ScoreNetwork::with_arch(3, arch, schedule, seed);
        // perturb tables away from the identity so conditioning is exercised
        let mut r = rng::seeded(seed + 100);
        let start = net.table_offset;
        for v in &mut net.theta[start..] {
            *v += r.random_range(-0.3..0.3);
        }
        net
    }

    #[test]
    fn zero_output_layer_gives_zero_score() {
        let schedule = NoiseSchedule::from_endpoints(1.0, 0.01, 0.9).unwrap();
        let mut net = ScoreNetwork::new(2, &[8, 8], schedule, 3);
        let l = net.layout.num_layers() - 1;
        let (w, b) = (net.layout.weight_offset(l), net.layout.bias_offset(l));
        net.theta[w..b + 2].fill(0.0);
        for x in [[0.0, 0.0], [3.0, -1.0]] {
            assert_eq!(net.eval_score(&x, 1).unwrap(), vec![0.0, 0.0]);
            assert_eq!(net.eval_score(&x, net.num_scales()).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_checks_scale() {
        let net = small_net(1);
        let x = [0.2, 0.1, -0.4];
        assert_eq!(net.eval_score(&x, 2).unwrap(), net.eval_score(&x, 2).unwrap());
        assert!(matches!(net.eval_score(&x, 0), Err(Error::Precondition(_))));
        assert!(net.eval_score(&x, net.num_scales() + 1).is_err());
        assert!(matches!(net.eval_score(&[0.0], 1), Err(Error::Schema(_))));
    }

    #[test]
    fn scale_tables_change_the_output() {
        let net = small_net(2);
        let x = [0.2, 0.1, -0.4];
        assert_ne!(net.eval_score(&x, 1).unwrap(), net.eval_score(&x, 3).unwrap());
    }

    #[test]
    fn linear_network_input_gradient_is_transpose() {
        let schedule = NoiseSchedule::from_endpoints(1.0, 0.5, 0.5).unwrap();
        let mut net = ScoreNetwork::new(2, &[], schedule, 0);
        net.params_mut()[..6].copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        assert_eq!(net.eval_score(&[1.0, 1.0], 1).unwrap(), vec![3.0, 7.0]);
        let g = net.eval_score_input_grad(&[0.3, 0.9], 2, &[1.0, -2.0]).unwrap();
        assert_eq!(g, vec![1.0 - 6.0, 2.0 - 8.0]);
        assert_eq!(net.eval_score_input_grad(&[0.3, 0.9], 1, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dsm_loss_vanishes_for_oracle_estimator() {
        let schedule = NoiseSchedule::from_endpoints(2.0, 0.01, 0.99).unwrap();
        let batch = vec![vec![0.1, 0.2], vec![-1.0, 0.5], vec![0.0, 3.0]];
        let loss = dsm_loss_with(&batch, &schedule, 9, ScaleSampling::Uniform, |clean, noisy, i| {
            let s2 = schedule.weight(i);
            noisy.iter().zip(clean).map(|(n, c)| -(n - c) / s2).collect()
        })
        .unwrap();
        assert!(loss.abs() < 1e-20, "{loss}");
    }

    #[test]
    fn weighted_residual_is_scale_free() {
        let schedule = NoiseSchedule::from_endpoints(5.0, 0.01, 0.9).unwrap();
        let z = [0.3f64, -1.7, 0.8];
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 1..=schedule.len() {
            let s = schedule.sigma(i);
            let r = z.iter().map(|v| (v / s).powi(2)).sum::<f64>().sqrt();
            assert!((s * r - norm).abs() <= 1e-12 * norm);
        }
    }

    fn variants() -> Vec<ScoreArch> {
        let base = ScoreArch::with_widths(&[6, 5]);
        vec![
            base.clone(),
            ScoreArch {
                tables: ScaleTables::PerScale,
                output_gain: false,
                ..base.clone()
            },
            ScoreArch {
                output: OutputScaling::InverseSigma,
                sigma_input: true,
                tables: ScaleTables::Knots(3),
                ..base
            },
        ]
    }

    #[test]
    fn table_free_network_evaluates() {
        // no hidden layers and no output gain leaves the tables empty
        let arch = ScoreArch {
            output_gain: false,
            ..ScoreArch::with_widths(&[])
        };
        let net = small_net_with(4, arch);
        for scale in 1..=net.num_scales() {
            assert!(net.eval_score(&[0.3, -0.1, 0.2], scale).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        for arch in variants() {
            check_dsm_gradient(small_net_with(4, arch));
        }
    }

    fn check_dsm_gradient(net: ScoreNetwork) {
        let schedule = net.schedule().clone();
        let batch = vec![vec![0.1, 0.2, 0.3], vec![-0.5, 0.4, 0.0]];
        let (_, grad) = dsm_loss(&net, &batch, &schedule, 5).unwrap();
        let mut r = rng::seeded(6);
        for _ in 0..20 {
            let i = r.random_range(0..net.num_params());
            let h = 1e-6;
            let mut p = net.clone();
            p.theta[i] += h;
            let mut m = net.clone();
            m.theta[i] -= h;
            let fd = (dsm_loss(&p, &batch, &schedule, 5).unwrap().0
                - dsm_loss(&m, &batch, &schedule, 5).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-4), "coord {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn empty_batch_and_schedule_mismatch_rejected() {
        let net = small_net(1);
        assert!(matches!(dsm_loss(&net, &[], net.schedule(), 0), Err(Error::Precondition(_))));
        let other = NoiseSchedule::from_endpoints(1.0, 0.01, 0.5).unwrap();
        assert!(dsm_loss(&net, &[vec![0.0; 3]], &other, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        for arch in variants() {
            let net = small_net_with(7, arch);
            let text = net.to_smxn();
            assert!(text.starts_with("SMXN 1 3 "));
            let back = ScoreNetwork::from_smxn(&text, Path::new("mem")).unwrap();
            assert_eq!(back, net);
        }
        let net = small_net(7);
        let text = net.to_smxn();
        let bad = text.replacen("output_gain=1", "output_gain=0", 1);
        assert!(ScoreNetwork::from_smxn(&bad, Path::new("mem")).is_err());
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(ScoreNetwork::from_smxn(&truncated, Path::new("mem")).is_err());
        assert!(ScoreNetwork::from_smxn("SMXN 2 3 3 6\n", Path::new("mem")).is_err());
    }

    #[test]
    fn all_scales_sampling_averages_over_schedule() {
        let schedule = NoiseSchedule::from_endpoints(1.0, 0.1, 0.7).unwrap();
        let batch = vec![vec![0.0]];
        // zero estimator: every term is |z|^2, the mean over scales of N draws
        let loss = dsm_loss_with(&batch, &schedule, 3, ScaleSampling::AllScales, |_, _, _| vec![0.0]).unwrap();
        let draws = draw_perturbations(1, 1, &schedule, 3, ScaleSampling::AllScales);
        assert_eq!(draws.len(), schedule.len());
        let expect = draws.iter().map(|p| p.noise[0] * p.noise[0]).sum::<f64>() / schedule.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
    }
}
