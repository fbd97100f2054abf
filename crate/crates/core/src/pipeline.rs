//! End-to-end stages shared by the command-line tool and the tests:
//! corpus synthesis, supervised training, RadCliQ fitting, RL refinement
//! and evaluation.

use std::path::Path;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::{Config, ConfigError};
use crate::metrics::{self, EmbeddingCache, MetricError, MetricReport, RadCliqWeights};
use crate::model::{corpus_vocabulary, Example, Model, ModelError};
use crate::regions::{RegionError, RegionSet};
use crate::rl::{rl_finetune, RewardModel, RlCorpus, RlError, RlLogRow};
use crate::synth::{self, SynthError};
use crate::text::TextError;
use crate::train::{self, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("region file {path}: {source}")]
    Regions { path: String, source: RegionError },
    #[error("{0}")]
    Mismatch(String),
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    std::fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Generates the corpus described by `config` into `dir`.
pub fn synthesize(config: &Config, dir: &Path) -> Result<synth::Corpus, PipelineError> {
    let c = &config.corpus;
    let corpus = synth::gen_corpus(c.n, c.ratios, c.seed, &c.synth)?;
    synth::write_corpus(&corpus, dir)?;
    Ok(corpus)
}

/// Region descriptions from the configured file, or the first `K` of the
/// built-in set.
pub fn load_regions(config: &Config) -> Result<RegionSet, PipelineError> {
    match &config.paths.regions {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })?;
            RegionSet::parse(&text, config.model.regions).map_err(|source| PipelineError::Regions {
                path: path.display().to_string(),
                source,
            })
        }
        None => Ok(RegionSet::default_prefix(config.model.regions).map_err(ModelError::from)?),
    }
}

pub fn load_split(config: &Config, dir: &Path, split: &str) -> Result<Vec<Example>, PipelineError> {
    Ok(synth::load_split(dir, split, config.model.image_size, config.model.classes)?)
}

/// Freshly initialized model whose vocabulary covers the training reports.
pub fn build_model(config: &Config, train_set: &[Example]) -> Result<Model, PipelineError> {
    let regions = load_regions(config)?;
    let reports: Vec<&str> = train_set.iter().map(|e| e.report.as_str()).collect();
    let vocab = corpus_vocabulary(&reports, &regions, &config.model.instruction)?;
    Ok(Model::new(config.model.clone(), vocab, regions, config.train.seed)?)
}

/// Supervised stage on the corpus in `dir`. The returned model holds the
/// best-validation parameters rounded to checkpoint precision.
pub fn run_train(config: &Config, dir: &Path) -> Result<(Model, TrainOutcome), PipelineError> {
    let train_set = load_split(config, dir, "train")?;
    let val_set = load_split(config, dir, "val")?;
    let mut model = build_model(config, &train_set)?;
    let outcome = train::train(&mut model, &train_set, &val_set, &config.train, |_, _| {})?;
    model.params.round_to_f32();
    Ok((model, outcome))
}

/// Report embeddings from the model's text encoder.
pub fn embedder(model: &Model) -> impl FnMut(&str) -> Option<Vec<f64>> + '_ {
    move |text: &str| match model.text_embedding(text) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("cannot embed report: {e}");
            None
        }
    }
}

/// Fits RadCliQ weights on the corrupted fitting pairs of the corpus.
pub fn fit_weights(model: &Model, dir: &Path) -> Result<RadCliqWeights, PipelineError> {
    let pairs = synth::load_fit_pairs(dir)?;
    let mut cache = EmbeddingCache::new(embedder(model));
    let data: Vec<_> = pairs
        .iter()
        .map(|(cand, reference, count)| (cache.components(cand, reference), *count as f64))
        .collect();
    let w = metrics::fit_radcliq_weights(&data)?;
    log::info!(
        "RadCliQ weights: intercept {:.4}, coefficients {:?}",
        w.intercept,
        w.coefs
    );
    Ok(w)
}

/// RL stage on the training split; `policy` is refined in place.
pub fn run_rl(
    config: &Config,
    policy: &mut Model,
    dir: &Path,
    weights: RadCliqWeights,
) -> Result<Vec<RlLogRow>, PipelineError> {
    let train_set = load_split(config, dir, "train")?;
    let corpus = RlCorpus::new(policy, &train_set)?;
    let frozen = policy.clone();
    let mut rewards = RewardModel {
        kind: config.rl.reward,
        weights,
        offset: config.rl.reward_offset,
        embeddings: EmbeddingCache::new(embedder(&frozen)),
    };
    let outcome = rl_finetune(policy, &corpus, &mut rewards, &config.rl, |_| {})?;
    Ok(outcome.log)
}

/// Greedy reports for every example, in order.
pub fn generate_reports(model: &Model, examples: &[Example]) -> Result<Vec<String>, PipelineError> {
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    let features = model.visual_features(&images)?;
    features
        .iter()
        .map(|f| Ok(model.greedy_report(f)?.text))
        .collect()
}

/// Metric report of greedy generations against the reference reports.
pub fn evaluate(
    model: &Model,
    examples: &[Example],
    weights: Option<&RadCliqWeights>,
) -> Result<(MetricReport, Vec<String>), PipelineError> {
    let candidates = generate_reports(model, examples)?;
    let references: Vec<String> = examples.iter().map(|e| e.report.clone()).collect();
    let mut cache = EmbeddingCache::new(embedder(model));
    let report = metrics::evaluate(&candidates, &references, &mut cache, weights)?;
    Ok((report, candidates))
}

/// Checks that a checkpoint's architecture matches the requested config.
pub fn check_model_config(stored: &Config, requested: &Config) -> Result<(), PipelineError> {
    if stored.model != requested.model {
        return Err(PipelineError::Mismatch(
            "checkpoint model settings differ from the config".into(),
        ));
    }
    Ok(())
}
