//! Procedural corpus: region-coded images, templated reports with
//! negations, label vectors, and corrupted report variants with known
//! error counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grammar::{self, Mention, FINDINGS};
use crate::image::{GrayImage, ImageError};
use crate::model::Example;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("{requested} corruptions requested but only {available} editable findings")]
    TooManyErrors { requested: usize, available: usize },
    #[error("corruption count must be at least 1")]
    NoErrors,
    #[error("could not fill the split quotas after {0} draws")]
    Exhausted(usize),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Manifest { path: String, line: usize, reason: String },
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Side length of the square images.
    pub image_size: usize,
    /// Probability that each finding is present.
    pub prevalence: f64,
    /// Probability that an absent finding is explicitly negated.
    pub negation_prob: f64,
    pub background: f64,
    pub noise_std: f64,
    /// Peak intensity added by a finding's motif.
    pub motif_intensity: f64,
    /// Maximum motif displacement in pixels (at 64 px scale).
    pub jitter: f64,
    /// Fraction of training samples that receive corrupted fitting variants.
    pub fit_fraction: f64,
    /// Largest corruption count in the fitting set.
    pub max_fit_errors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            prevalence: 0.3,
            negation_prob: 0.5,
            background: 0.15,
            noise_std: 0.03,
            motif_intensity: 0.6,
            jitter: 3.0,
            fit_fraction: 0.25,
            max_fit_errors: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(SynthError::Config(format!(
                "image size {} must be a multiple of 4 and at least 16",
                self.image_size
            )));
        }
        if !unit(self.prevalence) || !unit(self.negation_prob) || !unit(self.fit_fraction) {
            return Err(SynthError::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0 && self.jitter >= 0.0 && self.background.is_finite() && self.motif_intensity.is_finite()) {
            return Err(SynthError::Config("noise and jitter must be non-negative".into()));
        }
        if self.max_fit_errors > FINDINGS.len() {
            return Err(SynthError::Config(format!(
                "max fitting errors {} exceeds {} findings",
                self.max_fit_errors,
                FINDINGS.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub report: String,
    pub labels: Vec<bool>,
    /// Number of edits applied to the ground-truth report; 0 if uncorrupted.
    pub corruption_count: usize,
}

impl Sample {
    pub fn to_example(&self) -> Example {
        Example {
            image: self.image.clone(),
            report: self.report.clone(),
            labels: self.labels.clone(),
        }
    }
}

fn gaussian_blob(img: &mut GrayImage, cx: f64, cy: f64, sx: f64, sy: f64, amp: f64) {
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = (x as f64 + 0.5 - cx) / sx;
            let dy = (y as f64 + 0.5 - cy) / sy;
            let v = img.get(x, y) + amp * (-0.5 * (dx * dx + dy * dy)).exp();
            img.set(x, y, v);
        }
    }
}

/// Renders the image for a label vector: noisy background plus one motif
/// per positive finding at its anatomical location.
pub fn render_image<R: Rng>(labels: &[bool], config: &SynthConfig, rng: &mut R) -> GrayImage {
    let size = config.image_size;
    let s = size as f64 / 64.0;
    let mut img = GrayImage::filled(size, size, config.background);
    for (i, &on) in labels.iter().enumerate() {
        let jx = rng.random_range(-1.0..=1.0) * config.jitter;
        let jy = rng.random_range(-1.0..=1.0) * config.jitter;
        if !on {
            continue;
        }
        // (cx, cy, sx, sy) at 64 px scale.
        let (cx, cy, sx, sy) = match i {
            0 => (16.0, 26.0, 5.0, 6.0),
            1 => (48.0, 26.0, 5.0, 6.0),
            2 => (38.0, 40.0, 7.0, 7.0),
            3 => (52.0, 56.0, 4.0, 3.5),
            _ => (32.0, 14.0, 1.5, 7.0),
        };
        gaussian_blob(&mut img, (cx + jx) * s, (cy + jy) * s, sx * s, sy * s, config.motif_intensity);
    }
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).expect("finite noise std");
        for p in &mut img.pixels {
            *p += noise.sample(rng);
        }
    }
    for p in &mut img.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    img
}

/// Ground-truth mentions for a label vector: positives at their canonical
/// region, negatives negated with probability `negation_prob`.
pub fn sample_mentions<R: Rng>(labels: &[bool], negation_prob: f64, rng: &mut R) -> Vec<Mention> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &on)| {
            let negate = rng.random_bool(negation_prob);
            if on {
                Mention::Present {
                    region: FINDINGS[i].region.to_string(),
                }
            } else if negate {
                Mention::Negated
            } else {
                Mention::Unmentioned
            }
        })
        .collect()
}

/// Sample from explicit labels; the image is quantized to the on-disk grid.
pub fn sample_with_labels(labels: &[bool], seed: u64, config: &SynthConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mentions = sample_mentions(labels, config.negation_prob, &mut rng);
    let image = render_image(labels, config, &mut rng).quantized();
    Sample {
        image,
        report: grammar::render(&mentions),
        labels: labels.to_vec(),
        corruption_count: 0,
    }
}

pub fn gen_sample(seed: u64, config: &SynthConfig) -> Result<Sample, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..FINDINGS.len())
        .map(|_| rng.random_bool(config.prevalence))
        .collect();
    let label_seed = rng.random::<u64>();
    Ok(sample_with_labels(&labels, label_seed, config))
}

/// Applies `n_errors` edits to distinct findings of the report: a present
/// finding is negated, deleted, or moved to a wrong region; a negated one
/// is flipped to present or deleted; an unmentioned one is added.
pub fn corrupt_sample(sample: &Sample, n_errors: usize, seed: u64) -> Result<Sample, SynthError> {
    if n_errors == 0 {
        return Err(SynthError::NoErrors);
    }
    if n_errors > FINDINGS.len() {
        return Err(SynthError::TooManyErrors {
            requested: n_errors,
            available: FINDINGS.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mentions = grammar::mentions_of(&sample.report);
    let mut units: Vec<usize> = (0..FINDINGS.len()).collect();
    units.shuffle(&mut rng);
    for &i in &units[..n_errors] {
        let f = &FINDINGS[i];
        let present = |r: &str| Mention::Present { region: r.to_string() };
        mentions[i] = match &mentions[i] {
            Mention::Present { region } => match rng.random_range(0..3) {
                0 => Mention::Negated,
                1 => Mention::Unmentioned,
                _ if region == f.swap_region => present(f.region),
                _ => present(f.swap_region),
            },
            Mention::Negated => {
                if rng.random_bool(0.5) {
                    present(f.region)
                } else {
                    Mention::Unmentioned
                }
            }
            Mention::Unmentioned => present(f.region),
        };
    }
    let report = grammar::render(&mentions);
    Ok(Sample {
        image: sample.image.clone(),
        labels: grammar::extract_labels(&report),
        report,
        corruption_count: n_errors,
    })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const FIT_MANIFEST: &str = "fit.tsv";

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Image path relative to the corpus directory.
    pub image_path: String,
    pub report: String,
    pub labels: Vec<bool>,
    pub corruption_count: usize,
}

pub fn label_bits(labels: &[bool]) -> String {
    labels.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\n",
            self.image_path,
            self.report,
            label_bits(&self.labels),
            self.corruption_count
        )
    }
}

/// FNV-1a over the seed bytes followed by the string bytes.
fn fnv1a(seed: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(s.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Split index of a report: every occurrence of a report string lands in
/// the same split.
fn split_of(seed: u64, report: &str, ratios: &[f64; 3]) -> usize {
    let u = (fnv1a(seed, report) >> 11) as f64 / (1u64 << 53) as f64;
    let mut acc = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        acc += r;
        if u < acc {
            return i;
        }
    }
    ratios.iter().rposition(|&r| r > 0.0).unwrap_or(0)
}

/// Split sizes: `floor(n·r)` for validation and test, the rest for training.
pub fn split_quotas(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let val = (n as f64 * ratios[1] + 1e-9).floor() as usize;
    let test = (n as f64 * ratios[2] + 1e-9).floor() as usize;
    [n - val - test, val, test]
}

/// Samples per split plus the fitting set, all in memory.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub splits: [Vec<Sample>; 3],
    /// `(train index, corrupted variant)` pairs.
    pub fit: Vec<(usize, Sample)>,
}

/// Draws samples until every split quota is filled. Samples whose report
/// hashes into an already full split are discarded.
pub fn gen_corpus(n: usize, ratios: [f64; 3], seed: u64, config: &SynthConfig) -> Result<Corpus, SynthError> {
    config.validate()?;
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let quotas = split_quotas(n, &ratios);
    let mut corpus = Corpus::default();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let max_draws = 200 * n + 1000;
    let mut draws = 0;
    while (0..3).any(|s| corpus.splits[s].len() < quotas[s]) {
        if draws == max_draws {
            return Err(SynthError::Exhausted(draws));
        }
        draws += 1;
        let sample = gen_sample(master.random::<u64>(), config)?;
        let s = split_of(seed, &sample.report, &ratios);
        if corpus.splits[s].len() < quotas[s] {
            corpus.splits[s].push(sample);
        }
    }
    let train = &corpus.splits[0];
    let n_fit = ((train.len() as f64 * config.fit_fraction).round() as usize).min(train.len());
    for (i, sample) in train.iter().enumerate().take(n_fit) {
        let errors = master.random_range(0..=config.max_fit_errors);
        let variant_seed = master.random::<u64>();
        let variant = if errors == 0 {
            sample.clone()
        } else {
            corrupt_sample(sample, errors, variant_seed)?
        };
        corpus.fit.push((i, variant));
    }
    Ok(corpus)
}

fn image_name(split: &str, i: usize) -> String {
    format!("images/{split}_{i:05}.pgm")
}

/// Writes images and the `train/val/test.tsv` and `fit.tsv` manifests.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), SynthError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for (s, split) in SPLITS.iter().enumerate() {
        let mut text = String::new();
        for (i, sample) in corpus.splits[s].iter().enumerate() {
            let name = image_name(split, i);
            let path = dir.join(&name);
            fs::write(&path, sample.image.to_pgm()).map_err(io_err(&path))?;
            text.push_str(
                &ManifestEntry {
                    image_path: name,
                    report: sample.report.clone(),
                    labels: sample.labels.clone(),
                    corruption_count: 0,
                }
                .to_line(),
            );
        }
        let path = dir.join(format!("{split}.tsv"));
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    let mut text = String::new();
    for (i, variant) in &corpus.fit {
        text.push_str(
            &ManifestEntry {
                image_path: image_name("train", *i),
                report: variant.report.clone(),
                labels: variant.labels.clone(),
                corruption_count: variant.corruption_count,
            }
            .to_line(),
        );
    }
    let path = dir.join(FIT_MANIFEST);
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, reason: String| SynthError::Manifest {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(n + 1, format!("expected 4 columns, found {}", cols.len())));
        }
        let labels = cols[2]
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad(n + 1, format!("bad label bits {:?}", cols[2]))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let corruption_count = cols[3]
            .parse()
            .map_err(|_| bad(n + 1, format!("bad corruption count {:?}", cols[3])))?;
        out.push(ManifestEntry {
            image_path: cols[0].to_string(),
            report: cols[1].to_string(),
            labels,
            corruption_count,
        });
    }
    Ok(out)
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

/// Loads one split as training examples, checking image size and label
/// width.
pub fn load_split(dir: &Path, split: &str, image_size: usize, classes: usize) -> Result<Vec<Example>, SynthError> {
    let path = manifest_path(dir, split);
    let mut cache: BTreeMap<String, GrayImage> = BTreeMap::new();
    read_manifest(&path)?
        .into_iter()
        .enumerate()
        .map(|(n, e)| {
            if e.labels.len() != classes {
                return Err(SynthError::Manifest {
                    path: path.display().to_string(),
                    line: n + 1,
                    reason: format!("{} labels, model expects {classes}", e.labels.len()),
                });
            }
            let image = match cache.get(&e.image_path) {
                Some(img) => img.clone(),
                None => {
                    let img = GrayImage::read_pgm(&dir.join(&e.image_path))?;
                    img.check_size(image_size)?;
                    cache.insert(e.image_path.clone(), img.clone());
                    img
                }
            };
            Ok(Example {
                image,
                report: e.report,
                labels: e.labels,
            })
        })
        .collect()
}

/// Fitting pairs `(candidate, reference, corruption_count)` joined with the
/// training manifest by image path.
pub fn load_fit_pairs(dir: &Path) -> Result<Vec<(String, String, usize)>, SynthError> {
    let train: BTreeMap<String, String> = read_manifest(&manifest_path(dir, "train"))?
        .into_iter()
        .map(|e| (e.image_path, e.report))
        .collect();
    let path = dir.join(FIT_MANIFEST);
    read_manifest(&path)?
        .into_iter()
        .enumerate()
        .map(|(n, e)| match train.get(&e.image_path) {
            Some(reference) => Ok((e.report, reference.clone(), e.corruption_count)),
            None => Err(SynthError::Manifest {
                path: path.display().to_string(),
                line: n + 1,
                reason: format!("{} is not in the training split", e.image_path),
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{extract_labels, parse_report};

    #[test]
    fn all_negative_image_is_background() {
        let config = SynthConfig {
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let s = sample_with_labels(&[false; 5], 3, &config);
        let bg = GrayImage::filled(64, 64, config.background).quantized();
        assert_eq!(s.image, bg);
        assert!(parse_report(&s.report).iter().all(|t| !t.positive));
    }

    #[test]
    fn same_seed_same_sample() {
        let c = SynthConfig::default();
        assert_eq!(gen_sample(11, &c).unwrap(), gen_sample(11, &c).unwrap());
        assert_ne!(gen_sample(11, &c).unwrap(), gen_sample(12, &c).unwrap());
    }

    #[test]
    fn labels_round_trip() {
        let c = SynthConfig::default();
        for seed in 0..200 {
            let s = gen_sample(seed, &c).unwrap();
            assert_eq!(extract_labels(&s.report), s.labels, "{}", s.report);
        }
    }

    #[test]
    fn corruption_rejects_bad_counts() {
        let s = gen_sample(1, &SynthConfig::default()).unwrap();
        assert!(matches!(corrupt_sample(&s, 0, 1), Err(SynthError::NoErrors)));
        assert!(matches!(corrupt_sample(&s, 6, 1), Err(SynthError::TooManyErrors { .. })));
    }

    #[test]
    fn quotas() {
        assert_eq!(split_quotas(10, &[0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(split_quotas(2000, &[0.8, 0.1, 0.1]), [1600, 200, 200]);
    }

    #[test]
    fn small_corpus_split_sizes() {
        let c = gen_corpus(10, [0.8, 0.1, 0.1], 5, &SynthConfig::default()).unwrap();
        let sizes: Vec<usize> = c.splits.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![8, 1, 1]);
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(gen_corpus(10, [0.5, 0.1, 0.1], 5, &SynthConfig::default()).is_err());
    }
}
