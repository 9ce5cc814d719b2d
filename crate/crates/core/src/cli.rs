//! Command-line front end: `make-data`, `train-score`, `augment`,
//! `train-gan`, `ablate-mu` and `eval`.
//!
//! Settings come from an optional `--config` file, then `--set key=value`
//! overrides, then the named flags of each command. Every command writes the
//! resolved configuration next to its outputs. Exit codes: 0 success,
//! 1 runtime failure (divergence), 2 usage or input error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::augment::{self, ScoreField};
use crate::config::{FieldSource, RunConfig};
use crate::dataset::{write_file, Dataset};
use crate::error::{Error, Result};
use crate::gan::{self, AugRatio, Pipeline, TrainingTrace};
use crate::metrics::{MetricReport, OracleReference};
use crate::plot::{self, Series};
use crate::schedule;
use crate::score_net::{self, ScoreNetwork};
use crate::synthetic::{self, GaussianMixture};

pub const CONFIG_ECHO: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(name = "scoremix", version, about = "Score-guided mixup augmentation for toy GANs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set gan.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataFlags {
    /// SMXD dataset to use instead of sampling a preset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset preset: ring8, grid25, gauss1[:tau[:dim]].
    #[arg(long)]
    pub preset: Option<String>,
    /// Oracle preset for metrics when the dataset is loaded from a file.
    #[arg(long)]
    pub reference: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a preset mixture into an SMXD file.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output SMXD path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a noise-conditional score network.
    TrainScore {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a ScoreMix-augmented pool.
    Augment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// SMXN score checkpoint (learned field).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `learned` or `analytic`.
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        mu: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a GAN under one augmentation pipeline.
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        pipeline: Option<String>,
        /// Static ratio or GROWING.
        #[arg(long)]
        mu: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one GAN per augmentation ratio and seed and compare.
    AblateMu {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        field: Option<String>,
        /// Comma-separated ratios, e.g. `0,1,10,GROWING`.
        #[arg(long)]
        mus: Option<String>,
        /// Comma-separated seed ladder.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a sample file against an oracle mixture.
    Eval {
        #[command(flatten)]
        common: Common,
        /// SMXD file of samples to evaluate.
        #[arg(long)]
        samples: PathBuf,
        /// Oracle preset.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_runtime() {
                1
            } else {
                2
            }
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn apply_data_flags(cfg: &mut RunConfig, flags: &DataFlags) -> Result<()> {
    set_opt(cfg, "data.path", &flags.data.as_ref().map(|p| p.display().to_string()))?;
    set_opt(cfg, "data.preset", &flags.preset)?;
    set_opt(cfg, "data.reference", &flags.reference)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::MakeData {
            common,
            preset,
            count,
            seed,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            set_opt(&mut cfg, "data.preset", &preset)?;
            set_opt(&mut cfg, "data.count", &count)?;
            set_opt(&mut cfg, "data.seed", &seed)?;
            cmd_make_data(&cfg, &out)
        }
        Command::TrainScore {
            common,
            data,
            steps,
            seed,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data_flags(&mut cfg, &data)?;
            set_opt(&mut cfg, "score.steps", &steps)?;
            set_opt(&mut cfg, "score.seed", &seed)?;
            cmd_train_score(&cfg, &out)
        }
        Command::Augment {
            common,
            data,
            checkpoint,
            field,
            mu,
            seed,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data_flags(&mut cfg, &data)?;
            set_opt(&mut cfg, "score.checkpoint", &checkpoint.map(|p| p.display().to_string()))?;
            set_opt(&mut cfg, "mix.field", &field)?;
            set_opt(&mut cfg, "mix.mu", &mu)?;
            set_opt(&mut cfg, "mix.seed", &seed)?;
            cmd_augment(&cfg, &out)
        }
        Command::TrainGan {
            common,
            data,
            checkpoint,
            field,
            pipeline,
            mu,
            epochs,
            seed,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data_flags(&mut cfg, &data)?;
            set_opt(&mut cfg, "score.checkpoint", &checkpoint.map(|p| p.display().to_string()))?;
            set_opt(&mut cfg, "mix.field", &field)?;
            set_opt(&mut cfg, "gan.pipeline", &pipeline)?;
            set_opt(&mut cfg, "gan.mu", &mu)?;
            set_opt(&mut cfg, "gan.epochs", &epochs)?;
            set_opt(&mut cfg, "gan.seed", &seed)?;
            cmd_train_gan(&cfg, &out)
        }
        Command::AblateMu {
            common,
            data,
            checkpoint,
            field,
            mus,
            seeds,
            epochs,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            apply_data_flags(&mut cfg, &data)?;
            set_opt(&mut cfg, "score.checkpoint", &checkpoint.map(|p| p.display().to_string()))?;
            set_opt(&mut cfg, "mix.field", &field)?;
            set_opt(&mut cfg, "ablate.mus", &mus)?;
            set_opt(&mut cfg, "ablate.seeds", &seeds)?;
            set_opt(&mut cfg, "gan.epochs", &epochs)?;
            cmd_ablate_mu(&cfg, &out)
        }
        Command::Eval {
            common,
            samples,
            reference,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.set("data.path", &samples.display().to_string())?;
            set_opt(&mut cfg, "data.reference", &reference)?;
            cmd_eval(&cfg, &out)
        }
    }
}

fn echo_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_file(path, &cfg.to_text())
}

/// The configured dataset: the SMXD file when `data.path` is set, else a
/// fresh preset sample.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => Dataset::load(p),
        None => synthetic::sample_gmm(&cfg.data.preset.mixture(), cfg.data.count, cfg.data.seed),
    }
}

/// Score field storage for a run.
pub enum OwnedField {
    Learned(ScoreNetwork),
    Analytic(GaussianMixture),
}

impl OwnedField {
    pub fn as_field(&self) -> ScoreField<'_> {
        match self {
            OwnedField::Learned(n) => ScoreField::Learned(n),
            OwnedField::Analytic(g) => ScoreField::Analytic(g),
        }
    }
}

pub fn load_field(cfg: &RunConfig) -> Result<OwnedField> {
    match cfg.mix.field {
        FieldSource::Analytic => Ok(OwnedField::Analytic(cfg.reference_preset().mixture())),
        FieldSource::Learned => {
            let path = cfg
                .score
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Schema("mix.field = learned needs score.checkpoint".into()))?;
            Ok(OwnedField::Learned(ScoreNetwork::load(path)?))
        }
    }
}

pub fn cmd_make_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = synthetic::sample_gmm(&cfg.data.preset.mixture(), cfg.data.count, cfg.data.seed)?;
    data.save(out)?;
    let mut echo = out.as_os_str().to_owned();
    echo.push(".cfg");
    echo_config(cfg, Path::new(&echo))?;
    println!(
        "wrote {} samples of {} (d={}, seed {}) to {}",
        data.len(),
        cfg.data.preset,
        data.dim(),
        cfg.data.seed,
        out.display()
    );
    Ok(())
}

pub fn cmd_train_score(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let schedule = schedule::make_schedule_with(&data, cfg.schedule.sigma_min, cfg.schedule.gamma)?;
    let trained = score_net::train_scorenet(&data, &schedule, &cfg.score.train)?;
    trained.network.save(&out.join("score.smxn"))?;
    write_file(&out.join("score_loss.csv"), &trained.losses_csv())?;
    echo_config(cfg, &out.join(CONFIG_ECHO))?;
    println!(
        "schedule: sigma_1 {:.6} sigma_N {:.6} N {} gamma {:.8}",
        schedule.sigma(1),
        schedule.sigma(schedule.len()),
        schedule.len(),
        schedule.gamma()
    );
    match trained.smoothed_endpoints(200) {
        Some((first, last)) => println!("smoothed loss: {first:.6} -> {last:.6}"),
        None => println!("no training steps; checkpoint is the initialization"),
    }
    Ok(())
}

pub fn cmd_augment(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let field = load_field(cfg)?;
    let mix = cfg.resolved_mix();
    let set = augment::augment_batch(&data, field.as_field(), &mix, cfg.mix.mu, mix.seed)?;
    set.dataset.save(&out.join("augmented.smxd"))?;
    augment::save_smxa(&out.join("audit.smxa"), &set.records)?;
    echo_config(cfg, &out.join(CONFIG_ECHO))?;
    println!("wrote {} augmented samples from {} real", set.dataset.len(), data.len());
    let gmm = cfg.reference_preset().mixture();
    if gmm.dim() == data.dim() && !set.records.is_empty() {
        let mut gain = 0usize;
        for r in &set.records {
            if gmm.log_density(&r.x_star)? >= gmm.log_density(&r.x_mixed)? - 1e-9 {
                gain += 1;
            }
        }
        let reduced = set
            .records
            .iter()
            .filter(|r| r.final_score_norm <= r.initial_score_norm)
            .count();
        let n = set.records.len() as f64;
        println!(
            "oracle density gain: {:.4} of samples; score norm non-increasing: {:.4}",
            gain as f64 / n,
            reduced as f64 / n
        );
    }
    Ok(())
}

fn trace_plot(title: &str, traces: &[(String, &TrainingTrace)]) -> String {
    let series: Vec<Series> = traces
        .iter()
        .map(|(name, t)| {
            Series::new(
                name.clone(),
                t.records.iter().map(|r| (r.epoch as f64, r.metrics.frechet)).collect(),
            )
        })
        .collect();
    plot::line_plot(title, "epoch", "Frechet distance", &series)
}

fn run_gan(cfg: &RunConfig, data: &Dataset, reference: &OracleReference) -> Result<TrainingTrace> {
    let needs_field = matches!(cfg.gan.pipeline, Pipeline::UnconditionalAugReal | Pipeline::ConditionalAugInput)
        && cfg.gan.mu != AugRatio::Static(0.0);
    let field = if needs_field { Some(load_field(cfg)?) } else { None };
    gan::train_gan(
        data,
        field.as_ref().map(OwnedField::as_field),
        &cfg.resolved_mix(),
        &cfg.gan,
        reference,
    )
}

pub fn cmd_train_gan(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let reference = OracleReference::new(&cfg.reference_preset().mixture())?;
    let trace = run_gan(cfg, &data, &reference)?;
    write_file(&out.join("trace.csv"), &trace.to_csv())?;
    trace.best_checkpoint.save(&out.join("best.smxg"))?;
    trace.final_model.save(&out.join("final.smxg"))?;
    let name = format!("{} mu={}", cfg.gan.pipeline, cfg.gan.mu);
    write_file(&out.join("trace.svg"), &trace_plot("GAN training", &[(name, &trace)]))?;
    echo_config(cfg, &out.join(CONFIG_ECHO))?;
    let (best, last) = (trace.best(), trace.last());
    println!(
        "best epoch {}: frechet {:.6} coverage {:.4}; final epoch {}: frechet {:.6} coverage {:.4}{}",
        best.epoch,
        best.metrics.frechet,
        best.metrics.mode_coverage,
        last.epoch,
        last.metrics.frechet,
        last.metrics.mode_coverage,
        if trace.early_stopped { " (early stopped)" } else { "" }
    );
    Ok(())
}

/// One ablation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mu: AugRatio,
    pub seed: u64,
    pub best: MetricReport,
    pub last: MetricReport,
    pub stopped_at: usize,
    pub early_stopped: bool,
}

pub const ABLATION_HEADER: &str =
    "mu,seed,best_frechet,best_mode_coverage,final_frechet,final_mode_coverage,stopped_at,early_stopped";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{},{}",
            r.mu,
            r.seed,
            r.best.frechet,
            r.best.mode_coverage,
            r.last.frechet,
            r.last.mode_coverage,
            r.stopped_at,
            u8::from(r.early_stopped)
        );
    }
    out
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Ablation summary: median best Fréchet per static ratio (ascending ratio)
/// and median final Fréchet of the growing regime and of the largest static ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVerdict {
    pub static_medians: Vec<(f64, f64)>,
    pub monotone: bool,
    pub growing_final: Option<f64>,
    pub largest_static_final: Option<f64>,
}

impl AblationVerdict {
    pub fn from_rows(rows: &[AblationRow]) -> Self {
        let mut mus: Vec<f64> = rows
            .iter()
            .filter_map(|r| match r.mu {
                AugRatio::Static(m) => Some(m),
                AugRatio::Growing => None,
            })
            .collect();
        mus.sort_by(f64::total_cmp);
        mus.dedup();
        let medians_of = |pick: &dyn Fn(&AblationRow) -> Option<f64>| {
            let mut v: Vec<f64> = rows.iter().filter_map(pick).collect();
            (!v.is_empty()).then(|| median(&mut v))
        };
        let static_medians: Vec<(f64, f64)> = mus
            .iter()
            .map(|&m| {
                let med = medians_of(&|r| (r.mu == AugRatio::Static(m)).then_some(r.best.frechet));
                (m, med.unwrap_or(f64::NAN))
            })
            .collect();
        let monotone = static_medians.windows(2).all(|w| w[1].1 <= w[0].1);
        let growing_final = medians_of(&|r| (r.mu == AugRatio::Growing).then_some(r.last.frechet));
        let largest_static_final = mus
            .last()
            .and_then(|&m| medians_of(&|r| (r.mu == AugRatio::Static(m)).then_some(r.last.frechet)));
        Self {
            static_medians,
            monotone,
            growing_final,
            largest_static_final,
        }
    }

    /// Growing regime strictly worse (higher final Fréchet) than the largest static ratio.
    pub fn growing_worse(&self) -> Option<bool> {
        Some(self.growing_final? > self.largest_static_final?)
    }

    pub fn report(&self) -> String {
        let mut out = String::from("median best frechet:");
        for (m, f) in &self.static_medians {
            let _ = write!(out, " mu={m}: {f:.6}");
        }
        let _ = write!(
            out,
            "\nnon-increasing in mu: {}",
            if self.monotone { "yes" } else { "no" }
        );
        if let (Some(g), Some(s), Some(w)) = (self.growing_final, self.largest_static_final, self.growing_worse()) {
            let _ = write!(
                out,
                "\nmedian final frechet: GROWING {g:.6} vs largest static {s:.6}; GROWING worse: {}",
                if w { "yes" } else { "no" }
            );
        }
        out
    }
}

pub fn cmd_ablate_mu(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let reference = OracleReference::new(&cfg.reference_preset().mixture())?;
    let mut rows = Vec::new();
    let mut first_traces = Vec::new();
    for &mu in &cfg.ablate.mus {
        for (k, &seed) in cfg.ablate.seeds.iter().enumerate() {
            let mut run = cfg.clone();
            run.gan.pipeline = Pipeline::UnconditionalAugReal;
            run.gan.mu = mu;
            run.gan.seed = seed;
            run.mix.config.seed = seed;
            let trace = run_gan(&run, &data, &reference)?;
            println!(
                "mu={mu} seed={seed}: best frechet {:.6}, final {:.6}",
                trace.best().metrics.frechet,
                trace.last().metrics.frechet
            );
            rows.push(AblationRow {
                mu,
                seed,
                best: trace.best().metrics,
                last: trace.last().metrics,
                stopped_at: trace.stopped_at,
                early_stopped: trace.early_stopped,
            });
            if k == 0 {
                first_traces.push((format!("mu={mu}"), trace));
            }
        }
    }
    write_file(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let refs: Vec<(String, &TrainingTrace)> = first_traces.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_file(&out.join("ablation.svg"), &trace_plot("augmentation ratio ablation", &refs))?;
    echo_config(cfg, &out.join(CONFIG_ECHO))?;
    let verdict = AblationVerdict::from_rows(&rows);
    println!("{}", verdict.report());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let reference = OracleReference::new(&cfg.reference_preset().mixture())?;
    let report = MetricReport::evaluate(data.samples(), &reference)?;
    write_file(
        &out.join("report.csv"),
        &format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()),
    )?;
    echo_config(cfg, &out.join(CONFIG_ECHO))?;
    print!("{}", report.table());
    Ok(())
}
