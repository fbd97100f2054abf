//! A small model and corpus that train in seconds.

#![allow(dead_code)]

use rrg_core::config::Config;
use rrg_core::model::{corpus_vocabulary, Example, Model, ModelConfig};
use rrg_core::regions::RegionSet;
use rrg_core::synth::{gen_corpus, Corpus};

pub fn config() -> Config {
    let mut c = Config::default();
    c.model = ModelConfig {
        dim: 8,
        heads: 2,
        image_size: 16,
        patch_size: 8,
        regions: 3,
        repeats: 1,
        text_layers: 1,
        image_layers: 1,
        vtrans_layers: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    c.corpus.synth.image_size = 16;
    c.corpus.n = 40;
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.train.warmup_steps = 2;
    c.train.lr = 5e-3;
    c
}

pub fn corpus(config: &Config) -> Corpus {
    let c = &config.corpus;
    gen_corpus(c.n, c.ratios, c.seed, &c.synth).unwrap()
}

pub fn examples(corpus: &Corpus, split: usize) -> Vec<Example> {
    corpus.splits[split].iter().map(|s| s.to_example()).collect()
}

pub fn model(config: &Config, train: &[Example]) -> Model {
    let regions = RegionSet::default_prefix(config.model.regions).unwrap();
    let reports: Vec<&str> = train.iter().map(|e| e.report.as_str()).collect();
    let vocab = corpus_vocabulary(&reports, &regions, &config.model.instruction).unwrap();
    Model::new(config.model.clone(), vocab, regions, config.train.seed).unwrap()
}
