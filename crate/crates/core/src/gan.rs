//! Toy GAN with the two augmentation pipelines: augmented samples as extra
//! "real" data for the discriminator, or as extra conditioning inputs for a
//! conditional generator. Also hosts the mixup baseline and early stopping.
//!
//! The discriminator minimizes `-E log D(x) - E log(1 - D(G(z)))`; the
//! generator minimizes the non-saturating `-E log D(G(z))`.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::adam::Adam;
use crate::augment::{self, MixConfig, ScoreField};
use crate::dataset::{write_file, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::metrics::{MetricReport, OracleReference};
use crate::mlp::{sigmoid, softplus, ForwardCache, MlpLayout};
use crate::rng;
use crate::synthetic::SampleVec;

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];
pub const DEFAULT_LATENT: usize = 8;
pub const EVAL_SAMPLES: usize = 4096;
pub const DEFAULT_PATIENCE: usize = 5;
pub const DEFAULT_PACK: usize = 4;

const SALT_INIT: u64 = 0;
const SALT_POOL: u64 = 1;
const SALT_STEP: u64 = 2;
const SALT_EVAL: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    /// Discriminator's real stream is real ∪ augmented.
    UnconditionalAugReal,
    /// Generator conditioning labels come from real ∪ augmented; the
    /// discriminator sees only real data as ground truth.
    ConditionalAugInput,
    NoAugmentation,
    /// Mixup applied to both real and fake discriminator batches.
    MixupBaseline,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [
        Pipeline::UnconditionalAugReal,
        Pipeline::ConditionalAugInput,
        Pipeline::NoAugmentation,
        Pipeline::MixupBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::UnconditionalAugReal => "unconditional_aug_real",
            Pipeline::ConditionalAugInput => "conditional_aug_input",
            Pipeline::NoAugmentation => "no_augmentation",
            Pipeline::MixupBaseline => "mixup_baseline",
        }
    }

    fn uses_score_field(self) -> bool {
        matches!(self, Pipeline::UnconditionalAugReal | Pipeline::ConditionalAugInput)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::schema(format!("unknown pipeline '{s}'")))
    }
}

/// Augmentation ratio: a fixed pool of `ceil(mu n)` samples, or fresh
/// augmentation of each real-stream draw with `grow_probability`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugRatio {
    Static(f64),
    Growing,
}

impl fmt::Display for AugRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugRatio::Static(mu) => write!(f, "{mu}"),
            AugRatio::Growing => f.write_str("GROWING"),
        }
    }
}

impl FromStr for AugRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("growing") {
            return Ok(AugRatio::Growing);
        }
        match s.parse::<f64>() {
            Ok(mu) if mu >= 0.0 && mu.is_finite() => Ok(AugRatio::Static(mu)),
            _ => Err(Error::schema(format!("mu must be a nonnegative number or GROWING, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainConfig {
    pub pipeline: Pipeline,
    pub mu: AugRatio,
    pub grow_probability: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Samples judged jointly by the discriminator.
    pub pack: usize,
    pub eval_samples: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::NoAugmentation,
            mu: AugRatio::Static(0.0),
            grow_probability: 1.0,
            epochs: 10_000,
            batch_size: 32,
            eval_every: 50,
            lr_g: 1e-3,
            lr_d: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            early_stop_patience: DEFAULT_PATIENCE,
            seed: 0,
            latent_dim: DEFAULT_LATENT,
            hidden: DEFAULT_HIDDEN.to_vec(),
            pack: DEFAULT_PACK,
            eval_samples: EVAL_SAMPLES,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::precondition("eval_every must be >= 1"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::precondition("early_stop_patience must be >= 1"));
        }
        if self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::precondition("batch_size and latent_dim must be >= 1"));
        }
        if self.pack == 0 || self.batch_size % self.pack != 0 {
            return Err(Error::precondition("batch_size must be a positive multiple of pack"));
        }
        if !(0.0..=1.0).contains(&self.grow_probability) {
            return Err(Error::precondition("grow_probability must be in [0,1]"));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::precondition("learning rates must be > 0"));
        }
        if let AugRatio::Static(mu) = self.mu {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::precondition("mu must be finite and >= 0"));
            }
        }
        if self.eval_samples < 2 {
            return Err(Error::precondition("eval_samples must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanModel {
    dim: usize,
    latent_dim: usize,
    num_classes: usize,
    pack: usize,
    shift: Vec<f64>,
    scale: Vec<f64>,
    g_layout: MlpLayout,
    d_layout: MlpLayout,
    theta_g: Vec<f64>,
    theta_d: Vec<f64>,
}

fn one_hot_into(out: &mut Vec<f64>, label: Option<usize>, classes: usize) {
    if classes > 0 {
        let start = out.len();
        out.resize(start + classes, 0.0);
        out[start + label.unwrap_or(0)] = 1.0;
    }
}

impl GanModel {
    /// `classes = 0` builds an unconditional model.
    pub fn new(dim: usize, latent_dim: usize, classes: usize, hidden: &[usize], seed: u64) -> Self {
        Self::packed(dim, latent_dim, classes, hidden, 1, seed)
    }

    /// Discriminator judging `pack` samples jointly (inputs concatenated).
    pub fn packed(dim: usize, latent_dim: usize, classes: usize, hidden: &[usize], pack: usize, seed: u64) -> Self {
        let pack = pack.max(1);
        let mut gs = vec![latent_dim + classes];
        gs.extend_from_slice(hidden);
        gs.push(dim);
        let mut ds = vec![pack * (dim + classes)];
        ds.extend_from_slice(hidden);
        ds.push(1);
        let (g_layout, d_layout) = (MlpLayout::new(gs), MlpLayout::new(ds));
        let mut theta_g = vec![0.0; g_layout.num_params()];
        let mut theta_d = vec![0.0; d_layout.num_params()];
        g_layout.init(&mut theta_g, &mut rng::substream(seed, 0));
        d_layout.init(&mut theta_d, &mut rng::substream(seed, 1));
        Self {
            dim,
            latent_dim,
            num_classes: classes,
            pack,
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            g_layout,
            d_layout,
            theta_g,
            theta_d,
        }
    }

    /// Data coordinates are `shift + scale * u` for network coordinates `u`.
    pub fn with_normalization(mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim(self.dim, shift.len(), "normalization shift")?;
        check_dim(self.dim, scale.len(), "normalization scale")?;
        if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) || shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::precondition("normalization needs finite shift and positive scale"));
        }
        self.shift = shift;
        self.scale = scale;
        Ok(self)
    }

    /// Per-coordinate mean and standard deviation of `samples`.
    pub fn normalization_for(samples: &[SampleVec]) -> (Vec<f64>, Vec<f64>) {
        let d = samples.first().map_or(0, Vec::len);
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for s in samples {
            for ((q, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *q += (v - m) * (v - m) / n;
            }
        }
        (mean, var.into_iter().map(|v| v.sqrt().max(1e-6)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pack(&self) -> usize {
        self.pack
    }

    pub fn normalization(&self) -> (&[f64], &[f64]) {
        (&self.shift, &self.scale)
    }

    pub fn generator_params(&self) -> &[f64] {
        &self.theta_g
    }

    pub fn discriminator_params(&self) -> &[f64] {
        &self.theta_d
    }

    pub fn generator_params_mut(&mut self) -> &mut [f64] {
        &mut self.theta_g
    }

    pub fn discriminator_params_mut(&mut self) -> &mut [f64] {
        &mut self.theta_d
    }

    pub fn generator_layout(&self) -> &MlpLayout {
        &self.g_layout
    }

    pub fn discriminator_layout(&self) -> &MlpLayout {
        &self.d_layout
    }

    fn g_input(&self, z: &[f64], label: Option<usize>) -> Vec<f64> {
        let mut v = z.to_vec();
        one_hot_into(&mut v, label, self.num_classes);
        v
    }

    /// Concatenated normalized inputs of one pack.
    fn d_input(&self, xs: &[SampleVec], labels: Option<&[usize]>) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.d_layout.input_dim());
        for (i, x) in xs.iter().enumerate() {
            v.extend(
                x.iter()
                    .zip(self.shift.iter().zip(&self.scale))
                    .map(|(v, (m, s))| (v - m) / s),
            );
            one_hot_into(&mut v, labels.map(|l| l[i]), self.num_classes);
        }
        v
    }

    fn to_data(&self, u: &[f64]) -> SampleVec {
        u.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(u, (m, s))| m + s * u)
            .collect()
    }

    pub fn generate(&self, z: &[f64], label: Option<usize>) -> Result<SampleVec> {
        check_dim(self.latent_dim, z.len(), "latent code")?;
        Ok(self.to_data(&self.g_layout.forward(&self.theta_g, &self.g_input(z, label), None).output))
    }

    /// Discriminator logit for one pack of samples.
    pub fn discriminate(&self, xs: &[SampleVec], labels: Option<&[usize]>) -> Result<f64> {
        check_dim(self.pack, xs.len(), "discriminator pack")?;
        for x in xs {
            check_dim(self.dim, x.len(), "discriminator input")?;
        }
        Ok(self.d_layout.forward(&self.theta_d, &self.d_input(xs, labels), None).output[0])
    }

    /// `count` samples from stream `seed`; labels cycle through `labels`.
    pub fn sample(&self, count: usize, seed: u64, labels: Option<&[usize]>) -> Vec<SampleVec> {
        let mut r = rng::seeded(seed);
        let mut cache = ForwardCache::default();
        (0..count)
            .map(|i| {
                let z = rng::standard_normal_vec(&mut r, self.latent_dim);
                let label = labels.map(|l| l[i % l.len()]);
                self.g_layout
                    .forward_into(&self.theta_g, &self.g_input(&z, label), None, &mut cache);
                self.to_data(&cache.output)
            })
            .collect()
    }

    /// SMXG v1: `SMXG 1 d latent classes pack`, `shift ...`, `scale ...`, then
    /// the generator and discriminator as SMXM blocks.
    pub fn to_smxg(&self) -> String {
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
        format!(
            "SMXG 1 {} {} {} {}\nshift {}\nscale {}\n{}{}",
            self.dim,
            self.latent_dim,
            self.num_classes,
            self.pack,
            row(&self.shift),
            row(&self.scale),
            mlp_to_smxm(&self.g_layout, &self.theta_g),
            mlp_to_smxm(&self.d_layout, &self.theta_d)
        )
    }

    pub fn from_smxg(text: &str, path: &Path) -> Result<Self> {
        let err = |m: &str| Error::parse(path, m.to_string());
        let mut lines = text.lines();
        let header: Vec<usize> = match lines.next().map(|l| l.split_whitespace().collect::<Vec<_>>()) {
            Some(h) if h.len() == 6 && h[0] == "SMXG" && h[1] == "1" => h[2..]
                .iter()
                .map(|t| t.parse().map_err(|_| err("bad SMXG header")))
                .collect::<Result<_>>()?,
            _ => return Err(err("bad SMXG header")),
        };
        let (dim, latent_dim, classes, pack) = (header[0], header[1], header[2], header[3]);
        if pack == 0 {
            return Err(err("pack must be >= 1"));
        }
        let mut vector = |key: &str| -> Result<Vec<f64>> {
            let line = lines.next().and_then(|l| l.strip_prefix(key)).ok_or_else(|| err("missing normalization line"))?;
            let v = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err("bad normalization value"))?;
            if v.len() != dim {
                return Err(err("normalization length does not match dimension"));
            }
            Ok(v)
        };
        let shift = vector("shift ")?;
        let scale = vector("scale ")?;
        let rest: Vec<&str> = lines.collect();
        let split = rest
            .iter()
            .rposition(|l| l.starts_with("SMXM"))
            .filter(|&i| i > 0)
            .ok_or_else(|| err("expected two SMXM blocks"))?;
        let (gl, tg) = mlp_from_smxm(&rest[..split].join("\n"), path)?;
        let (dl, td) = mlp_from_smxm(&rest[split..].join("\n"), path)?;
        if gl.input_dim() != latent_dim + classes
            || gl.output_dim() != dim
            || dl.input_dim() != pack * (dim + classes)
            || dl.output_dim() != 1
        {
            return Err(Error::schema("generator/discriminator layouts do not match the SMXG header"));
        }
        let model = Self {
            dim,
            latent_dim,
            num_classes: classes,
            pack,
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            g_layout: gl,
            d_layout: dl,
            theta_g: tg,
            theta_d: td,
        };
        model.with_normalization(shift, scale).map_err(|_| err("bad normalization"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_smxg())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_smxg(&text, path)
    }
}

/// Plain MLP checkpoint: `SMXM 1 <sizes...>`, `params P`, one value per line.
pub fn mlp_to_smxm(layout: &MlpLayout, theta: &[f64]) -> String {
    let mut out = String::from("SMXM 1");
    for s in layout.sizes() {
        let _ = write!(out, " {s}");
    }
    let _ = writeln!(out, "\nparams {}", theta.len());
    for v in theta {
        let _ = writeln!(out, "{v:.16e}");
    }
    out
}

pub fn mlp_from_smxm(text: &str, path: &Path) -> Result<(MlpLayout, Vec<f64>)> {
    let err = |m: String| Error::parse(path, m);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
    if header.len() < 4 || header[0] != "SMXM" || header[1] != "1" {
        return Err(err("bad SMXM header".into()));
    }
    let sizes = header[2..]
        .iter()
        .map(|t| t.parse::<usize>().ok().filter(|s| *s > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| err("bad layer size".into()))?;
    let layout = MlpLayout::new(sizes);
    let declared: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| err("missing params line".into()))?;
    let theta = lines
        .filter(|l| !l.trim().is_empty())
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| err(format!("bad parameter: {e}")))?;
    if declared != layout.num_params() || theta.len() != declared {
        return Err(err(format!(
            "layout needs {} parameters, header says {declared}, file has {}",
            layout.num_params(),
            theta.len()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(err("non-finite parameter".into()));
    }
    Ok((layout, theta))
}

/// Pairing for the mixup baseline: element `i` is mixed with `partner[i]`
/// at weight `lambda[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub partner: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl MixPlan {
    pub fn draw(len: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let mut partner = Vec::with_capacity(len);
        let mut lambda = Vec::with_capacity(len);
        for _ in 0..len {
            partner.push(r.random_range(0..len));
            lambda.push(augment::sample_lambda_with(alpha, &mut r)?);
        }
        Ok(Self { partner, lambda })
    }

    pub fn apply(&self, xs: &[SampleVec]) -> Result<Vec<SampleVec>> {
        if xs.len() != self.partner.len() {
            return Err(Error::schema(format!(
                "mix plan for {} elements applied to {}",
                self.partner.len(),
                xs.len()
            )));
        }
        (0..xs.len())
            .map(|i| augment::mixup(&xs[i], &xs[self.partner[i]], self.lambda[i]))
            .collect()
    }

    /// Gradients with respect to the unmixed elements.
    fn pullback(&self, grads: &[SampleVec]) -> Vec<SampleVec> {
        let mut out = vec![vec![0.0; grads.first().map_or(0, Vec::len)]; grads.len()];
        for (i, g) in grads.iter().enumerate() {
            let (l, p) = (self.lambda[i], self.partner[i]);
            for (j, v) in g.iter().enumerate() {
                out[i][j] += l * v;
                out[p][j] += (1.0 - l) * v;
            }
        }
        out
    }
}

/// Mixup of real-real and fake-fake pairs with a shared pairing and weight.
pub fn mixup_baseline_batch(
    real: &[SampleVec],
    fake: &[SampleVec],
    alpha: f64,
    seed: u64,
) -> Result<(Vec<SampleVec>, Vec<SampleVec>)> {
    if real.len() != fake.len() {
        return Err(Error::schema(format!(
            "real batch has {} samples, fake batch {}",
            real.len(),
            fake.len()
        )));
    }
    let plan = MixPlan::draw(real.len(), alpha, seed)?;
    Ok((plan.apply(real)?, plan.apply(fake)?))
}

/// Discriminator-side batch for one loss evaluation.
#[derive(Debug, Clone)]
pub struct DiscBatch<'a> {
    pub real: &'a [SampleVec],
    pub real_labels: Option<&'a [usize]>,
    pub fake: &'a [SampleVec],
    pub fake_labels: Option<&'a [usize]>,
}

/// `mean softplus(-D(real)) + mean softplus(D(fake))` and its
/// `theta_D` gradient; also the accuracies on real and fake.
pub fn discriminator_loss(model: &GanModel, batch: &DiscBatch) -> Result<(f64, Vec<f64>, f64, f64)> {
    if batch.real.is_empty() || batch.fake.is_empty() {
        return Err(Error::precondition("discriminator batch is empty"));
    }
    let mut grad = vec![0.0; model.theta_d.len()];
    let mut cache = ForwardCache::default();
    let mut loss = 0.0;
    let mut acc = [0usize; 2];
    let p = model.pack;
    for (side, (xs, labels)) in [(batch.real, batch.real_labels), (batch.fake, batch.fake_labels)]
        .into_iter()
        .enumerate()
    {
        check_packs(xs.len(), p)?;
        let n = (xs.len() / p) as f64;
        for (i, chunk) in xs.chunks(p).enumerate() {
            for x in chunk {
                check_dim(model.dim, x.len(), "discriminator input")?;
            }
            let input = model.d_input(chunk, labels.map(|l| &l[i * p..(i + 1) * p]));
            model.d_layout.forward_into(&model.theta_d, &input, None, &mut cache);
            let l = cache.output[0];
            // real: softplus(-l), fake: softplus(l)
            let sign = if side == 0 { -1.0 } else { 1.0 };
            loss += softplus(sign * l) / n;
            acc[side] += usize::from((l > 0.0) == (side == 0));
            let dl = sign * sigmoid(sign * l) / n;
            model.d_layout.backward(&model.theta_d, &cache, &[dl], None, Some(&mut grad), None);
        }
    }
    Ok((
        loss,
        grad,
        acc[0] as f64 * p as f64 / batch.real.len() as f64,
        acc[1] as f64 * p as f64 / batch.fake.len() as f64,
    ))
}

fn check_packs(len: usize, pack: usize) -> Result<()> {
    if len % pack != 0 {
        return Err(Error::precondition(format!("batch of {len} is not a multiple of the pack size {pack}")));
    }
    Ok(())
}

/// Non-saturating generator loss `mean softplus(-D(G(z)))` and its
/// `theta_G` gradient; fakes are optionally mixed by `plan` before `D`.
pub fn generator_loss(
    model: &GanModel,
    latents: &[SampleVec],
    labels: Option<&[usize]>,
    plan: Option<&MixPlan>,
) -> Result<(f64, Vec<f64>)> {
    if latents.is_empty() {
        return Err(Error::precondition("generator batch is empty"));
    }
    let p = model.pack;
    check_packs(latents.len(), p)?;
    let n = (latents.len() / p) as f64;
    let mut caches = Vec::with_capacity(latents.len());
    let mut fakes = Vec::with_capacity(latents.len());
    for (i, z) in latents.iter().enumerate() {
        check_dim(model.latent_dim, z.len(), "latent code")?;
        let c = model
            .g_layout
            .forward(&model.theta_g, &model.g_input(z, labels.map(|l| l[i])), None);
        fakes.push(model.to_data(&c.output));
        caches.push(c);
    }
    let shown = match plan {
        Some(p) => p.apply(&fakes)?,
        None => fakes,
    };
    let mut loss = 0.0;
    let mut dcache = ForwardCache::default();
    let mut grads_x = Vec::with_capacity(shown.len());
    let width = model.dim + model.num_classes;
    for (i, chunk) in shown.chunks(p).enumerate() {
        let input = model.d_input(chunk, labels.map(|l| &l[i * p..(i + 1) * p]));
        model.d_layout.forward_into(&model.theta_d, &input, None, &mut dcache);
        let l = dcache.output[0];
        loss += softplus(-l) / n;
        let dl = -sigmoid(-l) / n;
        let gin = model.d_layout.backward(&model.theta_d, &dcache, &[dl], None, None, None);
        for part in gin.chunks(width) {
            grads_x.push(part[..model.dim].iter().zip(&model.scale).map(|(g, s)| g / s).collect());
        }
    }
    if let Some(p) = plan {
        grads_x = p.pullback(&grads_x);
    }
    let mut grad = vec![0.0; model.theta_g.len()];
    for (c, gx) in caches.iter().zip(&grads_x) {
        let gu: Vec<f64> = gx.iter().zip(&model.scale).map(|(g, s)| g * s).collect();
        model.g_layout.backward(&model.theta_g, c, &gu, None, Some(&mut grad), None);
    }
    Ok((loss, grad))
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct GanState {
    pub model: GanModel,
    opt_g: Adam,
    opt_d: Adam,
}

impl GanState {
    pub fn new(model: GanModel, config: &GanTrainConfig) -> Self {
        let opt_g = Adam::new(model.theta_g.len(), config.lr_g, config.adam_beta1, config.adam_beta2, 1e-8);
        let opt_d = Adam::new(model.theta_d.len(), config.lr_d, config.adam_beta1, config.adam_beta2, 1e-8);
        Self { model, opt_g, opt_d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_acc_real: f64,
    pub d_acc_fake: f64,
}

/// Labels for the generator side of a step.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub real: &'a [SampleVec],
    pub real_labels: Option<&'a [usize]>,
    pub fake_labels: Option<&'a [usize]>,
    /// Beta shape of the mixup baseline; `None` disables mixing.
    pub mixup_alpha: Option<f64>,
}

/// One discriminator update followed by one generator update.
pub fn gan_step(state: &mut GanState, inputs: &StepInputs, seed: u64) -> Result<StepStats> {
    let b = inputs.real.len();
    if b == 0 {
        return Err(Error::precondition("real batch is empty"));
    }
    let k = state.model.latent_dim;
    let mut r = rng::seeded(seed);
    let z_d: Vec<SampleVec> = (0..b).map(|_| rng::standard_normal_vec(&mut r, k)).collect();
    let z_g: Vec<SampleVec> = (0..b).map(|_| rng::standard_normal_vec(&mut r, k)).collect();
    let mix_seed: u64 = r.random();
    let fake: Vec<SampleVec> = z_d
        .iter()
        .enumerate()
        .map(|(i, z)| state.model.generate(z, inputs.fake_labels.map(|l| l[i])))
        .collect::<Result<_>>()?;
    let (real, fake, plan) = match inputs.mixup_alpha {
        Some(alpha) => {
            let (mr, mf) = mixup_baseline_batch(inputs.real, &fake, alpha, mix_seed)?;
            let plan = MixPlan::draw(b, alpha, rng::derive_seed(mix_seed, 1))?;
            (mr, mf, Some(plan))
        }
        None => (inputs.real.to_vec(), fake, None),
    };
    let batch = DiscBatch {
        real: &real,
        real_labels: inputs.real_labels,
        fake: &fake,
        fake_labels: inputs.fake_labels,
    };
    let (d_loss, grad_d, d_acc_real, d_acc_fake) = discriminator_loss(&state.model, &batch)?;
    state.opt_d.step(&mut state.model.theta_d, &grad_d);
    let (g_loss, grad_g) = generator_loss(&state.model, &z_g, inputs.fake_labels, plan.as_ref())?;
    state.opt_g.step(&mut state.model.theta_g, &grad_g);
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !d_loss.is_finite() || !g_loss.is_finite() || !finite(&state.model.theta_d) || !finite(&state.model.theta_g) {
        return Err(Error::TrainingDiverged { step: 0 });
    }
    Ok(StepStats {
        d_loss,
        g_loss,
        d_acc_real,
        d_acc_fake,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub metrics: MetricReport,
    /// Means over the steps since the previous evaluation.
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_acc_real: f64,
    pub d_acc_fake: f64,
    /// Share of augmented samples among the stream draws since the last evaluation.
    pub aug_share: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub records: Vec<EvalRecord>,
    pub best_index: usize,
    pub best_checkpoint: GanModel,
    pub final_model: GanModel,
    /// Epoch at which training ended.
    pub stopped_at: usize,
    pub early_stopped: bool,
    pub pool_size: usize,
}

impl TrainingTrace {
    pub const CSV_HEADER: &'static str = "epoch,step,frechet,mode_coverage,high_quality_fraction,mean_log_density,sample_count,d_loss,g_loss,d_acc_real,d_acc_fake,aug_share";

    pub fn best(&self) -> &EvalRecord {
        &self.records[self.best_index]
    }

    pub fn last(&self) -> &EvalRecord {
        self.records.last().expect("trace has at least one evaluation")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                r.epoch,
                r.step,
                r.metrics.csv_row(),
                r.d_loss,
                r.g_loss,
                r.d_acc_real,
                r.d_acc_fake,
                r.aug_share
            );
        }
        out
    }
}

/// Tracks consecutive increases of the primary metric.
#[derive(Debug, Clone, Default)]
pub struct EarlyStopper {
    patience: usize,
    previous: Option<f64>,
    increases: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            ..Self::default()
        }
    }

    /// Records a metric; true once `patience` consecutive increases occurred.
    pub fn observe(&mut self, metric: f64) -> bool {
        if let Some(prev) = self.previous {
            if metric > prev {
                self.increases += 1;
            } else {
                self.increases = 0;
            }
        }
        self.previous = Some(metric);
        self.increases >= self.patience
    }
}

/// Stream of "real" draws: either the discriminator's ground truth or the
/// generator's conditioning inputs, depending on the pipeline.
struct Stream<'a> {
    samples: Vec<SampleVec>,
    labels: Option<Vec<usize>>,
    field: Option<ScoreField<'a>>,
    grow_probability: Option<f64>,
}

impl Stream<'_> {
    /// `count` uniform draws; under growing augmentation each draw is
    /// replaced by a fresh ScoreMix of itself and a random partner with the
    /// configured probability. Returns samples, labels and the augmented count.
    fn draw(
        &self,
        count: usize,
        real_len: usize,
        mix: &MixConfig,
        seed: u64,
    ) -> Result<(Vec<SampleVec>, Option<Vec<usize>>, usize)> {
        let n = self.samples.len();
        let mut xs = Vec::with_capacity(count);
        let mut ls = self.labels.as_ref().map(|_| Vec::with_capacity(count));
        let mut augmented = 0;
        for j in 0..count {
            let mut r = rng::substream(seed, j as u64);
            let i = r.random_range(0..n);
            let label = self.labels.as_ref().map(|l| l[i]);
            let mut x = self.samples[i].clone();
            if i >= real_len {
                augmented += 1;
            }
            if let (Some(p), Some(field)) = (self.grow_probability, self.field) {
                if r.random::<f64>() < p {
                    let partner = self.partner(i, &mut r);
                    let cfg = MixConfig {
                        seed: r.random(),
                        ..mix.clone()
                    };
                    x = augment::scoremix(&self.samples[i], &self.samples[partner], field, &cfg)?.x_star;
                    augmented += 1;
                }
            }
            xs.push(x);
            if let (Some(ls), Some(l)) = (ls.as_mut(), label) {
                ls.push(l);
            }
        }
        Ok((xs, ls, augmented))
    }

    fn partner(&self, i: usize, r: &mut rng::Rng) -> usize {
        let n = self.samples.len();
        match &self.labels {
            Some(labels) => {
                let same: Vec<usize> = (0..n).filter(|&k| k != i && labels[k] == labels[i]).collect();
                if same.is_empty() {
                    i
                } else {
                    same[r.random_range(0..same.len())]
                }
            }
            None => (i + r.random_range(1..n)) % n,
        }
    }
}

fn evaluate(model: &GanModel, labels: Option<&[usize]>, config: &GanTrainConfig, reference: &OracleReference) -> Result<MetricReport> {
    let samples = model.sample(config.eval_samples, rng::derive_seed(config.seed, SALT_EVAL), labels);
    MetricReport::evaluate(&samples, reference)
}

/// Trains a GAN under `config.pipeline`, evaluating against `reference`.
pub fn train_gan(
    dataset: &Dataset,
    field: Option<ScoreField>,
    mix: &MixConfig,
    config: &GanTrainConfig,
    reference: &OracleReference,
) -> Result<TrainingTrace> {
    train_gan_with(dataset, field, mix, config, reference, |_| {})
}

/// As [`train_gan`], calling `progress` after every evaluation.
pub fn train_gan_with(
    dataset: &Dataset,
    field: Option<ScoreField>,
    mix: &MixConfig,
    config: &GanTrainConfig,
    reference: &OracleReference,
    mut progress: impl FnMut(&EvalRecord),
) -> Result<TrainingTrace> {
    config.validate()?;
    mix.validate()?;
    if dataset.len() < 2 {
        return Err(Error::precondition("GAN training needs >= 2 samples"));
    }
    check_dim(reference.gmm.dim(), dataset.dim(), "reference oracle")?;
    let conditional = config.pipeline == Pipeline::ConditionalAugInput;
    let labels = if conditional {
        let l = dataset
            .labels()
            .ok_or_else(|| Error::schema("conditional_aug_input needs a labelled dataset"))?;
        dataset.validate_labels()?;
        Some(l.to_vec())
    } else {
        None
    };
    let dataset_used = if conditional {
        dataset.clone()
    } else {
        dataset.clone().without_labels()
    };
    let wants_field = config.pipeline.uses_score_field()
        && !matches!(config.mu, AugRatio::Static(mu) if mu == 0.0);
    if wants_field {
        let f = field.ok_or_else(|| Error::precondition(format!("pipeline {} needs a score field", config.pipeline)))?;
        check_dim(dataset.dim(), f.dim(), "score field")?;
    }
    let n_real = dataset.len();
    let (mut pool, mut pool_labels) = (dataset_used.samples().to_vec(), labels.clone());
    let mut grow = None;
    if wants_field {
        match config.mu {
            AugRatio::Static(mu) => {
                let aug = augment::augment_batch(
                    &dataset_used,
                    field.unwrap(),
                    mix,
                    mu,
                    rng::derive_seed(config.seed, SALT_POOL),
                )?;
                pool.extend_from_slice(aug.dataset.samples());
                if let (Some(pl), Some(al)) = (pool_labels.as_mut(), aug.dataset.labels()) {
                    pl.extend_from_slice(al);
                }
            }
            AugRatio::Growing => grow = Some(config.grow_probability),
        }
    }
    let pool_size = pool.len() - n_real;
    let (real_stream, cond_stream) = {
        let aug_stream = Stream {
            samples: pool,
            labels: pool_labels,
            field,
            grow_probability: grow,
        };
        let plain = Stream {
            samples: dataset_used.samples().to_vec(),
            labels: labels.clone(),
            field: None,
            grow_probability: None,
        };
        if conditional {
            (plain, Some(aug_stream))
        } else {
            (aug_stream, None)
        }
    };
    let classes = if conditional { dataset.num_classes() } else { 0 };
    let model = GanModel::packed(
        dataset.dim(),
        config.latent_dim,
        classes,
        &config.hidden,
        config.pack,
        rng::derive_seed(config.seed, SALT_INIT),
    );
    let (shift, scale) = GanModel::normalization_for(dataset_used.samples());
    let model = model.with_normalization(shift, scale)?;
    let eval_labels: Option<Vec<usize>> = labels.as_ref().map(|l| {
        let mut r = rng::seeded(rng::derive_seed(config.seed, SALT_EVAL + 100));
        (0..config.eval_samples).map(|_| l[r.random_range(0..l.len())]).collect()
    });
    let mut state = GanState::new(model, config);
    let steps_per_epoch = n_real.div_ceil(config.batch_size);
    let mixup_alpha = (config.pipeline == Pipeline::MixupBaseline).then_some(mix.alpha);
    let step_seed = rng::derive_seed(config.seed, SALT_STEP);
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut best: Option<(usize, GanModel)> = None;
    let mut acc = [0.0f64; 4];
    let (mut acc_steps, mut drawn, mut augmented) = (0usize, 0usize, 0usize);
    let mut step = 0usize;
    let mut stopped_at = 0;
    let mut early_stopped = false;
    for epoch in 1..=config.epochs {
        for _ in 0..steps_per_epoch {
            let s = rng::derive_seed(step_seed, step as u64);
            let (real, real_labels, aug_real) = real_stream.draw(config.batch_size, n_real, mix, rng::derive_seed(s, 0))?;
            let (fake_labels, aug_cond) = match &cond_stream {
                Some(cs) => {
                    let (_, l, a) = cs.draw(config.batch_size, n_real, mix, rng::derive_seed(s, 1))?;
                    (l, a)
                }
                None => (None, 0),
            };
            let inputs = StepInputs {
                real: &real,
                real_labels: real_labels.as_deref(),
                fake_labels: fake_labels.as_deref(),
                mixup_alpha,
            };
            let st = gan_step(&mut state, &inputs, rng::derive_seed(s, 2)).map_err(|e| match e {
                Error::TrainingDiverged { .. } => Error::TrainingDiverged { step },
                other => other,
            })?;
            for (a, v) in acc.iter_mut().zip([st.d_loss, st.g_loss, st.d_acc_real, st.d_acc_fake]) {
                *a += v;
            }
            acc_steps += 1;
            drawn += config.batch_size;
            augmented += if conditional { aug_cond } else { aug_real };
            step += 1;
        }
        stopped_at = epoch;
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let metrics = evaluate(&state.model, eval_labels.as_deref(), config, reference)?;
            let m = acc_steps.max(1) as f64;
            let rec = EvalRecord {
                epoch,
                step,
                metrics,
                d_loss: acc[0] / m,
                g_loss: acc[1] / m,
                d_acc_real: acc[2] / m,
                d_acc_fake: acc[3] / m,
                aug_share: if drawn == 0 { 0.0 } else { augmented as f64 / drawn as f64 },
            };
            acc = [0.0; 4];
            (acc_steps, drawn, augmented) = (0, 0, 0);
            progress(&rec);
            let better = best.as_ref().is_none_or(|(i, _)| rec.metrics.frechet < records[*i].metrics.frechet);
            if better {
                best = Some((records.len(), state.model.clone()));
            }
            let stop = stopper.observe(rec.metrics.frechet);
            records.push(rec);
            if stop {
                early_stopped = true;
                break;
            }
        }
    }
    if records.is_empty() {
        let metrics = evaluate(&state.model, eval_labels.as_deref(), config, reference)?;
        records.push(EvalRecord {
            epoch: 0,
            step: 0,
            metrics,
            d_loss: f64::NAN,
            g_loss: f64::NAN,
            d_acc_real: f64::NAN,
            d_acc_fake: f64::NAN,
            aug_share: 0.0,
        });
        best = Some((0, state.model.clone()));
    }
    let (best_index, best_checkpoint) = best.unwrap();
    Ok(TrainingTrace {
        records,
        best_index,
        best_checkpoint,
        final_model: state.model,
        stopped_at,
        early_stopped,
        pool_size,
    })
}
