//! Strict flat `key = value` configuration covering the model, both
//! training stages, corpus synthesis and file locations.
//!
//! Lines are `section.key = value`; `#` starts a comment outside quotes;
//! string values may be double-quoted. Unknown or repeated keys and
//! out-of-range values are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelConfig;
use crate::optim::OptimizerKind;
use crate::rl::{KlWeight, RewardKind, RlConfig};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("`{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Region-description TSV; the built-in set when `None`.
    pub regions: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            regions: None,
            checkpoint: PathBuf::from("model.ckpt"),
            metrics: PathBuf::from("metrics.csv"),
        }
    }
}

/// Corpus size, seed and split ratios plus the generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n: usize,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub synth: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 7,
            ratios: [0.8, 0.1, 0.1],
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rl: RlConfig,
    pub corpus: CorpusConfig,
    pub paths: Paths,
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str, line: usize) -> Result<String, ConfigError> {
    if let Some(rest) = v.strip_prefix('"') {
        let inner = rest.strip_suffix('"').ok_or_else(|| ConfigError::Syntax {
            line,
            reason: "unterminated string".into(),
        })?;
        if inner.contains('"') {
            return Err(ConfigError::Syntax {
                line,
                reason: "embedded quote in string".into(),
            });
        }
        Ok(inner.to_string())
    } else {
        Ok(v.to_string())
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| invalid(key, format!("cannot parse {v:?}")))
}

fn float(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() {
        return Err(invalid(key, "must be finite"));
    }
    Ok(x)
}

fn optional_float(key: &str, v: &str) -> Result<Option<f64>, ConfigError> {
    if v == "none" {
        Ok(None)
    } else {
        float(key, v).map(Some)
    }
}

fn show_optional(v: Option<f64>) -> String {
    v.map_or("none".to_string(), |x| x.to_string())
}

impl Config {
    fn set(&mut self, key: &str, v: &str) -> Result<bool, ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let r = &mut self.rl;
        let c = &mut self.corpus;
        let s = &mut c.synth;
        match key {
            "model.dim" => m.dim = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.image_size" => {
                m.image_size = num(key, v)?;
                s.image_size = m.image_size;
            }
            "model.patch_size" => m.patch_size = num(key, v)?,
            "model.regions" => m.regions = num(key, v)?,
            "model.classes" => m.classes = num(key, v)?,
            "model.text_layers" => m.text_layers = num(key, v)?,
            "model.image_layers" => m.image_layers = num(key, v)?,
            "model.repeats" => m.repeats = num(key, v)?,
            "model.vtrans_layers" => m.vtrans_layers = num(key, v)?,
            "model.decoder_layers" => m.decoder_layers = num(key, v)?,
            "model.max_report_len" => m.max_report_len = num(key, v)?,
            "model.text_max_len" => m.text_max_len = num(key, v)?,
            "model.vocab_cap" => m.vocab_cap = num(key, v)?,
            "model.instruction" => m.instruction = v.to_string(),
            "train.lambda" => t.lambda = float(key, v)?,
            "train.lr" => t.lr = float(key, v)?,
            "train.min_lr_fraction" => t.min_lr_fraction = float(key, v)?,
            "train.warmup_steps" => t.warmup_steps = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.clip_norm" => t.clip_norm = optional_float(key, v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(invalid(key, "expected adam or sgd")),
                }
            }
            "rl.theta" => r.theta = float(key, v)?,
            "rl.bleu_theta" => r.bleu_theta = float(key, v)?,
            "rl.reward_offset" => r.reward_offset = float(key, v)?,
            "rl.reward" => {
                r.reward = match v {
                    "radcliq" => RewardKind::RadCliq,
                    "bleu4" => RewardKind::Bleu4,
                    _ => return Err(invalid(key, "expected radcliq or bleu4")),
                }
            }
            "rl.kl_weight" => {
                r.kl_weight = if v == "adaptive" {
                    KlWeight::Adaptive
                } else {
                    KlWeight::Fixed(float(key, v)?)
                }
            }
            "rl.clip_eps" => r.clip_eps = float(key, v)?,
            "rl.rollouts" => r.rollouts = num(key, v)?,
            "rl.temperature" => r.temperature = float(key, v)?,
            "rl.lr" => r.lr = float(key, v)?,
            "rl.ppo_epochs" => r.ppo_epochs = num(key, v)?,
            "rl.iterations" => r.iterations = num(key, v)?,
            "rl.baseline_momentum" => r.baseline_momentum = float(key, v)?,
            "rl.clip_norm" => r.clip_norm = optional_float(key, v)?,
            "rl.seed" => r.seed = num(key, v)?,
            "synth.n" => c.n = num(key, v)?,
            "synth.seed" => c.seed = num(key, v)?,
            "synth.train_ratio" => c.ratios[0] = float(key, v)?,
            "synth.val_ratio" => c.ratios[1] = float(key, v)?,
            "synth.test_ratio" => c.ratios[2] = float(key, v)?,
            "synth.prevalence" => s.prevalence = float(key, v)?,
            "synth.negation_prob" => s.negation_prob = float(key, v)?,
            "synth.background" => s.background = float(key, v)?,
            "synth.noise_std" => s.noise_std = float(key, v)?,
            "synth.motif_intensity" => s.motif_intensity = float(key, v)?,
            "synth.jitter" => s.jitter = float(key, v)?,
            "synth.fit_fraction" => s.fit_fraction = float(key, v)?,
            "synth.max_fit_errors" => s.max_fit_errors = num(key, v)?,
            "paths.corpus" => self.paths.corpus = PathBuf::from(v),
            "paths.regions" => self.paths.regions = (!v.is_empty()).then(|| PathBuf::from(v)),
            "paths.checkpoint" => self.paths.checkpoint = PathBuf::from(v),
            "paths.metrics" => self.paths.metrics = PathBuf::from(v),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses configuration text over the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                reason: format!("expected `key = value`, found {content:?}"),
            })?;
            let key = key.trim();
            let value = unquote(value.trim(), line)?;
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            if !config.set(key, &value)? {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        self.rl.validate().map_err(|e| invalid("rl", e.to_string()))?;
        self.corpus.synth.validate().map_err(|e| invalid("synth", e.to_string()))?;
        if self.corpus.synth.image_size != self.model.image_size {
            return Err(invalid("model.image_size", "differs from the synthesized image size"));
        }
        if self.model.classes != crate::grammar::FINDINGS.len() {
            return Err(invalid(
                "model.classes",
                format!("the report grammar defines {} findings", crate::grammar::FINDINGS.len()),
            ));
        }
        let ratios = &self.corpus.ratios;
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("synth.train_ratio", "split ratios must lie in [0, 1] and sum to 1"));
        }
        if self.corpus.n == 0 {
            return Err(invalid("synth.n", "must be positive"));
        }
        Ok(())
    }

    /// Canonical text with every key, parseable back into an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let r = &self.rl;
        let c = &self.corpus;
        let s = &c.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.dim", m.dim.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.image_size", m.image_size.to_string());
        kv("model.patch_size", m.patch_size.to_string());
        kv("model.regions", m.regions.to_string());
        kv("model.classes", m.classes.to_string());
        kv("model.text_layers", m.text_layers.to_string());
        kv("model.image_layers", m.image_layers.to_string());
        kv("model.repeats", m.repeats.to_string());
        kv("model.vtrans_layers", m.vtrans_layers.to_string());
        kv("model.decoder_layers", m.decoder_layers.to_string());
        kv("model.max_report_len", m.max_report_len.to_string());
        kv("model.text_max_len", m.text_max_len.to_string());
        kv("model.vocab_cap", m.vocab_cap.to_string());
        kv("model.instruction", format!("\"{}\"", m.instruction));
        kv("train.lambda", t.lambda.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.min_lr_fraction", t.min_lr_fraction.to_string());
        kv("train.warmup_steps", t.warmup_steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.clip_norm", show_optional(t.clip_norm));
        kv(
            "train.optimizer",
            match t.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .to_string(),
        );
        kv("rl.theta", r.theta.to_string());
        kv("rl.bleu_theta", r.bleu_theta.to_string());
        kv("rl.reward_offset", r.reward_offset.to_string());
        kv(
            "rl.reward",
            match r.reward {
                RewardKind::RadCliq => "radcliq",
                RewardKind::Bleu4 => "bleu4",
            }
            .to_string(),
        );
        kv(
            "rl.kl_weight",
            match r.kl_weight {
                KlWeight::Adaptive => "adaptive".to_string(),
                KlWeight::Fixed(w) => w.to_string(),
            },
        );
        kv("rl.clip_eps", r.clip_eps.to_string());
        kv("rl.rollouts", r.rollouts.to_string());
        kv("rl.temperature", r.temperature.to_string());
        kv("rl.lr", r.lr.to_string());
        kv("rl.ppo_epochs", r.ppo_epochs.to_string());
        kv("rl.iterations", r.iterations.to_string());
        kv("rl.baseline_momentum", r.baseline_momentum.to_string());
        kv("rl.clip_norm", show_optional(r.clip_norm));
        kv("rl.seed", r.seed.to_string());
        kv("synth.n", c.n.to_string());
        kv("synth.seed", c.seed.to_string());
        kv("synth.train_ratio", c.ratios[0].to_string());
        kv("synth.val_ratio", c.ratios[1].to_string());
        kv("synth.test_ratio", c.ratios[2].to_string());
        kv("synth.prevalence", s.prevalence.to_string());
        kv("synth.negation_prob", s.negation_prob.to_string());
        kv("synth.background", s.background.to_string());
        kv("synth.noise_std", s.noise_std.to_string());
        kv("synth.motif_intensity", s.motif_intensity.to_string());
        kv("synth.jitter", s.jitter.to_string());
        kv("synth.fit_fraction", s.fit_fraction.to_string());
        kv("synth.max_fit_errors", s.max_fit_errors.to_string());
        kv("paths.corpus", format!("\"{}\"", self.paths.corpus.display()));
        kv(
            "paths.regions",
            format!("\"{}\"", self.paths.regions.as_ref().map_or(String::new(), |p| p.display().to_string())),
        );
        kv("paths.checkpoint", format!("\"{}\"", self.paths.checkpoint.display()));
        kv("paths.metrics", format!("\"{}\"", self.paths.metrics.display()));
        out
    }
}
