//! The full report generation model: encoders, region extractor, visual
//! transfer, decoder and disease head, plus the supervised objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrg_autodiff::{Tensor, TensorError, Var};
use thiserror::Error;

use crate::encoders::{ImageEncoder, TextEncoder};
use crate::extractor::{global_feature, RegionExtractor};
use crate::generator::{DecodeMode, Decoder, DiseaseHead, Generation, VisualTransfer};
use crate::image::{GrayImage, ImageError};
use crate::params::{Graph, ParamStore};
use crate::regions::{RegionError, RegionSet};
use crate::text::{TextError, Vocabulary, BOS, EOS};

/// Instruction appended to the visual prompt rows.
pub const DEFAULT_INSTRUCTION: &str = "Please generate a radiology report for this chest X-ray image based on the provided global visual feature and region visual features. Assistant:";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("text is empty after tokenization")]
    EmptyText,
    #[error("prefix of length {len} exceeds maximum {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Side length of the square input images.
    pub image_size: usize,
    /// Side length `P` of the square patches.
    pub patch_size: usize,
    /// Number of region prompts `K`.
    pub regions: usize,
    /// Number of disease labels `C`.
    pub classes: usize,
    pub text_layers: usize,
    pub image_layers: usize,
    /// Region block repeats `R`.
    pub repeats: usize,
    pub vtrans_layers: usize,
    pub decoder_layers: usize,
    /// Maximum generated report length `M`, `[EOS]` included.
    pub max_report_len: usize,
    pub text_max_len: usize,
    pub vocab_cap: usize,
    pub instruction: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 1,
            image_size: 64,
            patch_size: 8,
            regions: 29,
            classes: 5,
            text_layers: 2,
            image_layers: 2,
            repeats: 3,
            vtrans_layers: 3,
            decoder_layers: 2,
            max_report_len: 64,
            text_max_len: 128,
            vocab_cap: 1000,
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

impl ModelConfig {
    /// Number of image tokens `N`.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("regions", self.regions),
            ("classes", self.classes),
            ("repeats", self.repeats),
            ("max_report_len", self.max_report_len),
            ("text_max_len", self.text_max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Parameter-name prefixes of the visual feature extractor (both encoders
/// and the region blocks).
pub const EXTRACTOR_PREFIXES: [&str; 3] = ["text.", "image.", "extractor."];

pub fn is_extractor_param(name: &str) -> bool {
    EXTRACTOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Shared vocabulary over the training reports, every sentence the report
/// grammar can produce, the region descriptions and the instruction.
pub fn corpus_vocabulary<S: AsRef<str>>(reports: &[S], regions: &RegionSet, instruction: &str) -> Result<Vocabulary, TextError> {
    let mut corpus: Vec<String> = reports.iter().map(|r| r.as_ref().to_string()).collect();
    corpus.extend(crate::grammar::grammar_sentences());
    corpus.extend(regions.iter().map(|r| r.description.clone()));
    corpus.push(instruction.to_string());
    Vocabulary::build(&corpus)
}

/// One supervised training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: GrayImage,
    pub report: String,
    pub labels: Vec<bool>,
}

/// Scalar values of the supervised loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub report: f64,
    pub disease: f64,
}

/// Greedy or sampled report together with its decoded text.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub generation: Generation,
    pub text: String,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub regions: RegionSet,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub extractor: RegionExtractor,
    pub vtrans: VisualTransfer,
    pub decoder: Decoder,
    pub disease: DiseaseHead,
    instruction_ids: Vec<usize>,
    region_ids: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, regions: RegionSet, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if regions.len() != config.regions {
            return Err(RegionError::WrongCount {
                expected: config.regions,
                found: regions.len(),
            }
            .into());
        }
        if vocab.len() > config.vocab_cap {
            return Err(ModelError::Config(format!(
                "vocabulary of {} tokens exceeds cap {}",
                vocab.len(),
                config.vocab_cap
            )));
        }
        let region_ids: Vec<Vec<usize>> = regions.iter().map(|r| vocab.tokenize(&r.description)).collect();
        if region_ids.iter().any(Vec::is_empty) {
            return Err(ModelError::EmptyText);
        }
        let instruction_ids = vocab.tokenize(&config.instruction);
        let (d, h, v) = (config.dim, config.heads, vocab.len());
        let prompt_len = 1 + config.regions + instruction_ids.len();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let text = TextEncoder::new(&mut params, &mut rng, v, d, config.text_layers, h, config.text_max_len);
        let image = ImageEncoder::new(
            &mut params,
            &mut rng,
            config.patch_size,
            config.tokens(),
            d,
            config.image_layers,
            h,
        );
        let extractor = RegionExtractor::new(&mut params, &mut rng, d, h, config.repeats);
        let vtrans = VisualTransfer::new(&mut params, &mut rng, d, h, config.vtrans_layers);
        let decoder = Decoder::new(
            &mut params,
            &mut rng,
            v,
            d,
            h,
            config.decoder_layers,
            prompt_len,
            config.max_report_len,
        );
        let disease = DiseaseHead::new(&mut params, &mut rng, 1 + config.regions, d, config.classes);
        Ok(Self {
            config,
            vocab,
            regions,
            params,
            text,
            image,
            extractor,
            vtrans,
            decoder,
            disease,
            instruction_ids,
            region_ids,
        })
    }

    /// Rebuilds a model around previously trained parameter values. Names
    /// and shapes must match the architecture exactly.
    pub fn with_params(config: ModelConfig, vocab: Vocabulary, regions: RegionSet, params: ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(config, vocab, regions, 0)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Shape(format!(
                "{} parameter tensors supplied, architecture has {}",
                params.len(),
                model.params.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(ModelError::Shape(format!(
                    "parameter {n2} {:?} does not match expected {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn prompt_len(&self) -> usize {
        self.decoder.prompt_len
    }

    pub fn instruction_len(&self) -> usize {
        self.instruction_ids.len()
    }

    /// Encodes every region description into a `K×D` matrix.
    pub fn region_text_features(&self, g: &mut Graph) -> Result<Var, ModelError> {
        let rows = self
            .region_ids
            .iter()
            .map(|ids| self.text.encode(g, ids))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(g.tape.concat_rows(&rows)?)
    }

    /// Encodes arbitrary text into a `1×D` feature.
    pub fn encode_text(&self, g: &mut Graph, text: &str) -> Result<Var, ModelError> {
        let ids = self.vocab.tokenize(text);
        self.text.encode(g, &ids)
    }

    /// Text-encoder feature of a report, `None` when it has no tokens.
    pub fn text_embedding(&self, text: &str) -> Result<Option<Vec<f64>>, ModelError> {
        if self.vocab.tokenize(text).is_empty() {
            return Ok(None);
        }
        let mut g = Graph::frozen(&self.params);
        let v = self.encode_text(&mut g, text)?;
        Ok(Some(g.tape.value(v).data().to_vec()))
    }

    /// Stacked `(batch·N)×P²` patch matrix.
    pub fn patch_input(&self, images: &[&GrayImage]) -> Result<Tensor, ModelError> {
        let p = self.config.patch_size;
        let mut data = Vec::new();
        for img in images {
            img.check_size(self.config.image_size)?;
            data.extend(img.patches(p)?.into_data());
        }
        Ok(Tensor::new(&[images.len() * self.config.tokens(), p * p], data)?)
    }

    /// Pre-transfer visual rows `[F_global; F_region]` for every image,
    /// stacked as `(batch·(1+K))×D`.
    pub fn visual_rows(&self, g: &mut Graph, images: &[&GrayImage]) -> Result<Var, ModelError> {
        let batch = images.len();
        let patches = self.patch_input(images)?;
        let patches = g.input(patches);
        let fi = self.image.encode(g, patches, batch)?;
        let global = global_feature(g, fi, batch)?;
        let text = self.region_text_features(g)?;
        let region = self.extractor.extract(g, fi, text, batch)?;
        self.join_rows(g, global, region, batch)
    }

    /// Interleaves `batch×D` global rows and `(batch·K)×D` region rows into
    /// per-sample `(1+K)×D` blocks.
    pub fn join_rows(&self, g: &mut Graph, global: Var, region: Var, batch: usize) -> Result<Var, ModelError> {
        let k = self.config.regions;
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            parts.push(if batch == 1 { global } else { g.tape.slice_rows(global, b, 1)? });
            parts.push(if batch == 1 { region } else { g.tape.slice_rows(region, b * k, k)? });
        }
        Ok(g.tape.concat_rows(&parts)?)
    }

    /// Multimodal prompt `[transferred rows; instruction embeddings]` of
    /// sample `b`, given transferred rows for the whole batch.
    pub fn prompt(&self, g: &mut Graph, transferred: Var, b: usize) -> Result<Var, ModelError> {
        let rows = 1 + self.config.regions;
        let total = g.tape.shape(transferred)[0];
        let visual = if total == rows { transferred } else { g.tape.slice_rows(transferred, b * rows, rows)? };
        if self.instruction_ids.is_empty() {
            return Ok(visual);
        }
        let inst = self.decoder.embed_tokens(g, &self.instruction_ids)?;
        Ok(g.tape.concat_rows(&[visual, inst])?)
    }

    /// Target ids for teacher forcing: report tokens truncated to `M − 1`
    /// followed by `[EOS]`.
    pub fn target_ids(&self, report: &str) -> Vec<usize> {
        let mut ids = self.vocab.tokenize(report);
        let cap = self.config.max_report_len - 1;
        if ids.len() > cap {
            log::warn!("report of {} tokens truncated to {cap}", ids.len());
            ids.truncate(cap);
        }
        ids.push(EOS);
        ids
    }

    /// Teacher-forcing input for `targets`: `[BOS] ++ targets[..T-1]`.
    pub fn teacher_prefix(targets: &[usize]) -> Vec<usize> {
        let mut prefix = Vec::with_capacity(targets.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&targets[..targets.len() - 1]);
        prefix
    }

    /// `λ·L_disease + L_report` averaged over the batch, with the
    /// components returned separately.
    pub fn supervised_loss(&self, g: &mut Graph, batch: &[&Example], lambda: f64) -> Result<(Var, LossParts), ModelError> {
        if lambda < 0.0 {
            return Err(ModelError::Config("lambda must be non-negative".into()));
        }
        let images: Vec<&GrayImage> = batch.iter().map(|e| &e.image).collect();
        let joint = self.visual_rows(g, &images)?;
        let b = batch.len();

        let logits = self.disease.forward(g, joint, b)?;
        let mut labels = Vec::with_capacity(b * self.config.classes);
        for e in batch {
            if e.labels.len() != self.config.classes {
                return Err(ModelError::Shape(format!(
                    "example has {} labels, model predicts {}",
                    e.labels.len(),
                    self.config.classes
                )));
            }
            labels.extend(e.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
        }
        let disease = g.tape.bce_with_logits(logits, &labels)?;

        let transferred = self.vtrans.forward(g, joint, b)?;
        let mut report_sum: Option<Var> = None;
        for (i, e) in batch.iter().enumerate() {
            let prompt = self.prompt(g, transferred, i)?;
            let targets = self.target_ids(&e.report);
            let prefix = Self::teacher_prefix(&targets);
            let logits = self.decoder.logits(g, prompt, &prefix)?;
            let ce = g.tape.cross_entropy(logits, &targets)?;
            report_sum = Some(match report_sum {
                Some(acc) => g.tape.add(acc, ce)?,
                None => ce,
            });
        }
        let report_sum = report_sum.ok_or_else(|| ModelError::Shape("empty batch".into()))?;
        let report = g.tape.scale(report_sum, 1.0 / b as f64)?;
        let weighted = g.tape.scale(disease, lambda)?;
        let total = g.tape.add(report, weighted)?;
        let parts = LossParts {
            total: g.tape.value(total).item(),
            report: g.tape.value(report).item(),
            disease: g.tape.value(disease).item(),
        };
        Ok((total, parts))
    }

    /// Frozen-extractor visual rows (`(1+K)×D`) for each image.
    pub fn visual_features(&self, images: &[&GrayImage]) -> Result<Vec<Tensor>, ModelError> {
        let rows = 1 + self.config.regions;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let mut g = Graph::frozen(&self.params);
            let joint = self.visual_rows(&mut g, chunk)?;
            let v = g.tape.value(joint);
            for b in 0..chunk.len() {
                let data = v.data()[b * rows * self.config.dim..(b + 1) * rows * self.config.dim].to_vec();
                out.push(Tensor::new(&[rows, self.config.dim], data)?);
            }
        }
        Ok(out)
    }

    /// Multimodal prompt for precomputed visual rows.
    pub fn prompt_from_features(&self, visual: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::frozen(&self.params);
        let x = g.input(visual.clone());
        let t = self.vtrans.forward(&mut g, x, 1)?;
        let p = self.prompt(&mut g, t, 0)?;
        Ok(g.tape.value(p).clone())
    }

    /// Per-label disease probabilities for precomputed visual rows.
    pub fn disease_probs(&self, visual: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::frozen(&self.params);
        let x = g.input(visual.clone());
        let logits = self.disease.forward(&mut g, x, 1)?;
        Ok(g.tape
            .value(logits)
            .data()
            .iter()
            .map(|&z| rrg_autodiff::kernels::sigmoid(z))
            .collect())
    }

    /// Greedy report for precomputed visual rows.
    pub fn greedy_report(&self, visual: &Tensor) -> Result<Report, ModelError> {
        let prompt = self.prompt_from_features(visual)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let generation = self.decoder.runner(&self.params).generate(
            &prompt,
            DecodeMode::Greedy,
            self.config.max_report_len,
            &mut unused,
        )?;
        self.to_report(generation)
    }

    pub fn to_report(&self, generation: Generation) -> Result<Report, ModelError> {
        let text = self.vocab.detokenize(generation.content())?;
        Ok(Report { generation, text })
    }

    /// End-to-end greedy generation for one image.
    pub fn generate(&self, image: &GrayImage) -> Result<Report, ModelError> {
        let visual = self.visual_features(&[image])?;
        self.greedy_report(&visual[0])
    }
}
