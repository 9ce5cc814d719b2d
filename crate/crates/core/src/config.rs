//! Run configuration: flat `key = value` files with `[section]` headers.
//!
//! Keys are addressed as `section.key`. Unknown keys and malformed values are
//! rejected. [`RunConfig::to_text`] writes every key, so an echoed file
//! reproduces the run on its own.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::MixConfig;
use crate::error::{Error, Result};
use crate::gan::{AugRatio, GanTrainConfig, Pipeline};
use crate::schedule::{DEFAULT_GAMMA, DEFAULT_SIGMA_MIN};
use crate::score_net::{OutputScaling, ScaleSampling, ScaleTables, ScoreTrainConfig};
use crate::synthetic::Preset;

/// Where the score field used for augmentation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSource {
    /// A trained network loaded from `score.checkpoint`.
    Learned,
    /// The exact score of the reference mixture.
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub preset: Preset,
    pub count: usize,
    pub seed: u64,
    /// Load this SMXD file instead of sampling the preset.
    pub path: Option<PathBuf>,
    /// Oracle used for metrics; defaults to `preset`.
    pub reference: Option<Preset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub sigma_min: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSection {
    pub train: ScoreTrainConfig,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixSection {
    pub config: MixConfig,
    /// `None` clamps iterates exactly when the reference preset is range bounded.
    pub clamp01: Option<bool>,
    pub mu: f64,
    pub field: FieldSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSection {
    pub mus: Vec<AugRatio>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub score: ScoreSection,
    pub mix: MixSection,
    pub gan: GanTrainConfig,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection {
                preset: Preset::Ring8,
                count: 64,
                seed: 1,
                path: None,
                reference: None,
            },
            schedule: ScheduleSection {
                sigma_min: DEFAULT_SIGMA_MIN,
                gamma: DEFAULT_GAMMA,
            },
            score: ScoreSection {
                train: ScoreTrainConfig::default(),
                checkpoint: None,
            },
            mix: MixSection {
                config: MixConfig::default(),
                clamp01: None,
                mu: 10.0,
                field: FieldSource::Learned,
            },
            gan: GanTrainConfig::default(),
            ablate: AblateSection {
                mus: vec![
                    AugRatio::Static(0.0),
                    AugRatio::Static(1.0),
                    AugRatio::Static(10.0),
                    AugRatio::Growing,
                ],
                seeds: (0..5).collect(),
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::schema(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::schema(format!("bad value '{value}' for {key}: expected true or false"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|t| parse(key, t.trim()))
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::schema(format!("{key} must not be empty")))
            } else {
                Ok(v)
            }
        })
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    let w: Vec<usize> = parse_list(key, value)?;
    if w.contains(&0) {
        return Err(Error::schema(format!("{key}: widths must be >= 1")));
    }
    Ok(w)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn preset_name(p: &Preset) -> String {
    match p {
        Preset::Gauss1 { tau, dim } => format!("gauss1:{tau}:{dim}"),
        other => other.to_string(),
    }
}

impl RunConfig {
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::parse(path, format!("line {}: {e}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(Error::schema(format!("expected key = value, got '{line}'"))))?;
            let key = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            self.set(&key, value.trim()).map_err(at)?;
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::schema(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let st = &mut self.score.train;
        let mx = &mut self.mix.config;
        let g = &mut self.gan;
        match key {
            "data.preset" => self.data.preset = value.parse()?,
            "data.count" => self.data.count = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.path" => self.data.path = opt_path(value),
            "data.reference" => {
                self.data.reference = if value.is_empty() { None } else { Some(value.parse()?) }
            }
            "schedule.sigma_min" => self.schedule.sigma_min = parse(key, value)?,
            "schedule.gamma" => self.schedule.gamma = parse(key, value)?,
            "score.learning_rate" => st.learning_rate = parse(key, value)?,
            "score.batch_size" => st.batch_size = parse(key, value)?,
            "score.steps" => st.steps = parse(key, value)?,
            "score.seed" => st.seed = parse(key, value)?,
            "score.adam_beta1" => st.adam_beta1 = parse(key, value)?,
            "score.adam_beta2" => st.adam_beta2 = parse(key, value)?,
            "score.adam_epsilon" => st.adam_epsilon = parse(key, value)?,
            "score.hidden" => st.arch.hidden_widths = parse_widths(key, value)?,
            "score.output" => {
                st.arch.output = match value {
                    "identity" => OutputScaling::Identity,
                    "inverse_sigma" => OutputScaling::InverseSigma,
                    _ => return Err(Error::schema(format!("bad value '{value}' for {key}"))),
                }
            }
            "score.sigma_input" => st.arch.sigma_input = parse_bool(key, value)?,
            "score.output_gain" => st.arch.output_gain = parse_bool(key, value)?,
            "score.tables" => {
                st.arch.tables = match value.strip_prefix("knots:") {
                    Some(k) => ScaleTables::Knots(
                        Some(parse::<usize>(key, k)?)
                            .filter(|k| *k >= 2)
                            .ok_or_else(|| Error::schema(format!("{key}: need >= 2 knots")))?,
                    ),
                    None if value == "per_scale" => ScaleTables::PerScale,
                    None => return Err(Error::schema(format!("bad value '{value}' for {key}"))),
                }
            }
            "score.scale_sampling" => {
                st.scale_sampling = match value {
                    "uniform" => ScaleSampling::Uniform,
                    "all" => ScaleSampling::AllScales,
                    _ => return Err(Error::schema(format!("bad value '{value}' for {key}"))),
                }
            }
            "score.checkpoint" => self.score.checkpoint = opt_path(value),
            "mix.alpha" => mx.alpha = parse(key, value)?,
            "mix.eta" => mx.eta = parse(key, value)?,
            "mix.steps" => mx.steps = parse(key, value)?,
            "mix.t0" => mx.t0 = parse(key, value)?,
            "mix.seed" => mx.seed = parse(key, value)?,
            "mix.grad_tol" => mx.grad_tol = parse(key, value)?,
            "mix.sufficient_decrease" => mx.sufficient_decrease = parse(key, value)?,
            "mix.lambda" => mx.lambda = if value.is_empty() { None } else { Some(parse(key, value)?) },
            "mix.clamp01" => {
                self.mix.clamp01 = if value == "auto" { None } else { Some(parse_bool(key, value)?) }
            }
            "mix.mu" => self.mix.mu = parse(key, value)?,
            "mix.field" => {
                self.mix.field = match value {
                    "learned" => FieldSource::Learned,
                    "analytic" => FieldSource::Analytic,
                    _ => return Err(Error::schema(format!("bad value '{value}' for {key}"))),
                }
            }
            "gan.pipeline" => g.pipeline = value.parse::<Pipeline>()?,
            "gan.mu" => g.mu = value.parse()?,
            "gan.grow_probability" => g.grow_probability = parse(key, value)?,
            "gan.epochs" => g.epochs = parse(key, value)?,
            "gan.batch_size" => g.batch_size = parse(key, value)?,
            "gan.eval_every" => g.eval_every = parse(key, value)?,
            "gan.lr_g" => g.lr_g = parse(key, value)?,
            "gan.lr_d" => g.lr_d = parse(key, value)?,
            "gan.adam_beta1" => g.adam_beta1 = parse(key, value)?,
            "gan.adam_beta2" => g.adam_beta2 = parse(key, value)?,
            "gan.early_stop_patience" => g.early_stop_patience = parse(key, value)?,
            "gan.seed" => g.seed = parse(key, value)?,
            "gan.latent_dim" => g.latent_dim = parse(key, value)?,
            "gan.hidden" => g.hidden = parse_widths(key, value)?,
            "gan.pack" => g.pack = parse(key, value)?,
            "gan.eval_samples" => g.eval_samples = parse(key, value)?,
            "ablate.mus" => self.ablate.mus = parse_list(key, value)?,
            "ablate.seeds" => self.ablate.seeds = parse_list(key, value)?,
            _ => return Err(Error::schema(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Oracle preset for metrics.
    pub fn reference_preset(&self) -> Preset {
        self.data.reference.unwrap_or(self.data.preset)
    }

    /// Mixing configuration with the clamp resolved against the reference.
    pub fn resolved_mix(&self) -> MixConfig {
        MixConfig {
            clamp01: self.mix.clamp01.unwrap_or_else(|| self.reference_preset().range_bounded()),
            ..self.mix.config.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.count == 0 {
            return Err(Error::schema("data.count must be >= 1"));
        }
        if !(self.schedule.sigma_min > 0.0) || !(self.schedule.gamma > 0.0 && self.schedule.gamma < 1.0) {
            return Err(Error::schema("schedule needs sigma_min > 0 and gamma in (0,1)"));
        }
        if !(self.mix.mu >= 0.0 && self.mix.mu.is_finite()) {
            return Err(Error::schema("mix.mu must be finite and >= 0"));
        }
        if self.ablate.seeds.is_empty() || self.ablate.mus.is_empty() {
            return Err(Error::schema("ablate lists must not be empty"));
        }
        self.score.train.validate()?;
        self.resolved_mix().validate()?;
        self.gan.validate()
    }

    /// Every key with its current value, grouped by section.
    pub fn to_text(&self) -> String {
        let st = &self.score.train;
        let mx = &self.mix.config;
        let g = &self.gan;
        let sections: Vec<(&str, Vec<(&str, String)>)> = vec![
            (
                "data",
                vec![
                    ("preset", preset_name(&self.data.preset)),
                    ("count", self.data.count.to_string()),
                    ("seed", self.data.seed.to_string()),
                    ("path", show_path(&self.data.path)),
                    ("reference", self.data.reference.as_ref().map(preset_name).unwrap_or_default()),
                ],
            ),
            (
                "schedule",
                vec![
                    ("sigma_min", self.schedule.sigma_min.to_string()),
                    ("gamma", self.schedule.gamma.to_string()),
                ],
            ),
            (
                "score",
                vec![
                    ("learning_rate", st.learning_rate.to_string()),
                    ("batch_size", st.batch_size.to_string()),
                    ("steps", st.steps.to_string()),
                    ("seed", st.seed.to_string()),
                    ("adam_beta1", st.adam_beta1.to_string()),
                    ("adam_beta2", st.adam_beta2.to_string()),
                    ("adam_epsilon", st.adam_epsilon.to_string()),
                    ("hidden", join(&st.arch.hidden_widths)),
                    (
                        "output",
                        match st.arch.output {
                            OutputScaling::Identity => "identity",
                            OutputScaling::InverseSigma => "inverse_sigma",
                        }
                        .to_string(),
                    ),
                    ("sigma_input", st.arch.sigma_input.to_string()),
                    ("output_gain", st.arch.output_gain.to_string()),
                    (
                        "tables",
                        match st.arch.tables {
                            ScaleTables::PerScale => "per_scale".to_string(),
                            ScaleTables::Knots(k) => format!("knots:{k}"),
                        },
                    ),
                    (
                        "scale_sampling",
                        match st.scale_sampling {
                            ScaleSampling::Uniform => "uniform",
                            ScaleSampling::AllScales => "all",
                        }
                        .to_string(),
                    ),
                    ("checkpoint", show_path(&self.score.checkpoint)),
                ],
            ),
            (
                "mix",
                vec![
                    ("alpha", mx.alpha.to_string()),
                    ("eta", mx.eta.to_string()),
                    ("steps", mx.steps.to_string()),
                    ("t0", mx.t0.to_string()),
                    ("seed", mx.seed.to_string()),
                    ("grad_tol", mx.grad_tol.to_string()),
                    ("sufficient_decrease", mx.sufficient_decrease.to_string()),
                    ("lambda", mx.lambda.map(|l| l.to_string()).unwrap_or_default()),
                    (
                        "clamp01",
                        self.mix.clamp01.map_or("auto".to_string(), |c| c.to_string()),
                    ),
                    ("mu", self.mix.mu.to_string()),
                    (
                        "field",
                        match self.mix.field {
                            FieldSource::Learned => "learned",
                            FieldSource::Analytic => "analytic",
                        }
                        .to_string(),
                    ),
                ],
            ),
            (
                "gan",
                vec![
                    ("pipeline", g.pipeline.to_string()),
                    ("mu", g.mu.to_string()),
                    ("grow_probability", g.grow_probability.to_string()),
                    ("epochs", g.epochs.to_string()),
                    ("batch_size", g.batch_size.to_string()),
                    ("eval_every", g.eval_every.to_string()),
                    ("lr_g", g.lr_g.to_string()),
                    ("lr_d", g.lr_d.to_string()),
                    ("adam_beta1", g.adam_beta1.to_string()),
                    ("adam_beta2", g.adam_beta2.to_string()),
                    ("early_stop_patience", g.early_stop_patience.to_string()),
                    ("seed", g.seed.to_string()),
                    ("latent_dim", g.latent_dim.to_string()),
                    ("hidden", join(&g.hidden)),
                    ("pack", g.pack.to_string()),
                    ("eval_samples", g.eval_samples.to_string()),
                ],
            ),
            (
                "ablate",
                vec![("mus", join(&self.ablate.mus)), ("seeds", join(&self.ablate.seeds))],
            ),
        ];
        let mut out = String::new();
        for (name, keys) in sections {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in keys {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        }
        out
    }
}
