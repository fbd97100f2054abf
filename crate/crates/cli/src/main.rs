//! `rrg`: synthesize corpora, train, refine with RL, evaluate and generate
//! reports from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rrg_core::checkpoint::{Checkpoint, CheckpointError};
use rrg_core::config::{Config, ConfigError};
use rrg_core::grammar::FINDINGS;
use rrg_core::image::GrayImage;
use rrg_core::pipeline::{self, PipelineError};
use rrg_core::rl::{self, KlWeight, RewardKind};
use rrg_core::synth::SynthError;
use rrg_core::train;
use thiserror::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "rrg", version, about = "Region-prompted radiology report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file; built-in defaults apply to unset keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output location (directory for `synth`, file otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Radcliq,
    Bleu4,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Supervised training; writes the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Per-epoch loss CSV (default: checkpoint path + `.loss.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Clinical-quality RL refinement of a supervised checkpoint.
    Rl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        reward: Option<RewardArg>,
        /// `adaptive` or a fixed weight in [0, 1].
        #[arg(long)]
        kl_weight: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Per-iteration RL CSV (default: output path + `.rl.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Greedy generation on a split and metric CSV output.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Generate a report for one PGM image.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Also print disease-head probabilities.
        #[arg(long)]
        labels: bool,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Input(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Input(format!("invalid checkpoint: {e}")),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => CliError::Io(e.to_string()),
            SynthError::Image(rrg_core::image::ImageError::Io { .. }) => CliError::Io(e.to_string()),
            SynthError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(e) => e.into(),
            PipelineError::Synth(e) => e.into(),
            PipelineError::Checkpoint(e) => e.into(),
            PipelineError::Io { .. } => CliError::Io(e.to_string()),
            PipelineError::Mismatch(_) | PipelineError::Regions { .. } => CliError::Config(e.to_string()),
            PipelineError::Model(rrg_core::model::ModelError::Image(_)) | PipelineError::Metric(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Loads a checkpoint; an explicit config must agree on the architecture
/// and otherwise supplies the run settings.
fn load_checkpoint(path: &Path, config: Option<&Path>) -> Result<(rrg_core::model::Model, Config, Option<rrg_core::metrics::RadCliqWeights>), CliError> {
    let (model, stored, weights) = Checkpoint::load(path)?.into_model()?;
    let config = match config {
        Some(p) => {
            let requested = Config::load(p)?;
            pipeline::check_model_config(&stored, &requested)?;
            requested
        }
        None => stored,
    };
    Ok((model, config, weights))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, n } => {
            let mut config = load_config(common.config.as_deref())?;
            if let Some(n) = n {
                config.corpus.n = n;
            }
            if let Some(seed) = common.seed {
                config.corpus.seed = seed;
            }
            config.validate()?;
            let dir = common.out.unwrap_or_else(|| config.paths.corpus.clone());
            let corpus = pipeline::synthesize(&config, &dir)?;
            log::info!(
                "wrote {}/{}/{} samples and {} fitting pairs to {}",
                corpus.splits[0].len(),
                corpus.splits[1].len(),
                corpus.splits[2].len(),
                corpus.fit.len(),
                dir.display()
            );
        }
        Command::Train { common, corpus, log } => {
            let mut config = load_config(common.config.as_deref())?;
            if let Some(seed) = common.seed {
                config.train.seed = seed;
            }
            let dir = corpus.unwrap_or_else(|| config.paths.corpus.clone());
            let out = common.out.unwrap_or_else(|| config.paths.checkpoint.clone());
            let (model, outcome) = pipeline::run_train(&config, &dir)?;
            log::info!("best validation loss at epoch {}", outcome.best_epoch);
            Checkpoint::from_model(&model, &config, None).save(&out)?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
            pipeline::write_file(&log_path, &train::epoch_log_csv(&outcome.log))?;
        }
        Command::Rl {
            common,
            checkpoint,
            corpus,
            reward,
            kl_weight,
            iterations,
            log,
        } => {
            let (mut model, mut config, weights) = load_checkpoint(&checkpoint, common.config.as_deref())?;
            if let Some(seed) = common.seed {
                config.rl.seed = seed;
            }
            if let Some(r) = reward {
                config.rl.reward = match r {
                    RewardArg::Radcliq => RewardKind::RadCliq,
                    RewardArg::Bleu4 => RewardKind::Bleu4,
                };
            }
            if let Some(w) = kl_weight {
                config.rl.kl_weight = match w.as_str() {
                    "adaptive" => KlWeight::Adaptive,
                    v => KlWeight::Fixed(
                        v.parse()
                            .map_err(|_| CliError::Config(format!("--kl-weight: cannot parse {v:?}")))?,
                    ),
                };
            }
            if let Some(n) = iterations {
                config.rl.iterations = n;
            }
            config.validate()?;
            let dir = corpus.unwrap_or_else(|| config.paths.corpus.clone());
            let out = common.out.unwrap_or_else(|| config.paths.checkpoint.clone());
            let weights = match weights {
                Some(w) => w,
                None => pipeline::fit_weights(&model, &dir)?,
            };
            let rows = pipeline::run_rl(&config, &mut model, &dir, weights)?;
            Checkpoint::from_model(&model, &config, Some(weights)).save(&out)?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out, ".rl.csv"));
            pipeline::write_file(&log_path, &rl::rl_log_csv(&rows))?;
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            split,
        } => {
            let (model, config, weights) = load_checkpoint(&checkpoint, common.config.as_deref())?;
            let dir = corpus.unwrap_or_else(|| config.paths.corpus.clone());
            let examples = pipeline::load_split(&config, &dir, &split)?;
            let weights = match weights {
                Some(w) => w,
                None => pipeline::fit_weights(&model, &dir)?,
            };
            let (report, _) = pipeline::evaluate(&model, &examples, Some(&weights))?;
            let out = common.out.unwrap_or_else(|| config.paths.metrics.clone());
            pipeline::write_file(&out, &report.to_csv())?;
            for (name, value) in &report.rows {
                log::info!("{name} = {value:.4}");
            }
        }
        Command::Generate {
            common,
            checkpoint,
            image,
            labels,
        } => {
            let (model, _, _) = load_checkpoint(&checkpoint, common.config.as_deref())?;
            let img = GrayImage::read_pgm(&image).map_err(|e| match e {
                rrg_core::image::ImageError::Io { .. } => CliError::Io(e.to_string()),
                _ => CliError::Input(e.to_string()),
            })?;
            img.check_size(model.config.image_size)
                .map_err(|e| CliError::Input(format!("{}: {e}", image.display())))?;
            let visual = model
                .visual_features(&[&img])
                .map_err(|e| CliError::Input(e.to_string()))?;
            let report = model
                .greedy_report(&visual[0])
                .map_err(|e| CliError::Internal(e.to_string()))?;
            println!("{}", report.text);
            if labels {
                let probs = model
                    .disease_probs(&visual[0])
                    .map_err(|e| CliError::Internal(e.to_string()))?;
                for (f, p) in FINDINGS.iter().zip(probs) {
                    println!("{}\t{p:.4}", f.name);
                }
            }
        }
    }
    Ok(())
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("RRG_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => {
            return Err(CliError::Config(format!(
                "RRG_LOG must be quiet, info or debug, not {other:?}"
            )))
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_logging().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
