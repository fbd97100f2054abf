//! Report-quality metrics: n-gram overlap scores, clinical efficacy from
//! parsed labels, and the fitted four-component quality composite.

pub mod clinical;
pub mod nlg;
pub mod radcliq;

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::grammar::extract_labels;
use crate::text::split_tokens;

pub use clinical::{ce_prf, Prf};
pub use nlg::{bleu4, meteor_simple, rouge_l};
pub use radcliq::{component_vector, fit_radcliq_weights, radcliq_proxy, Components, RadCliqWeights};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty corpus")]
    Empty,
    #[error("{found} fitting pairs, at least {required} required")]
    TooFewPairs { found: usize, required: usize },
    #[error("fitting design is singular even with ridge")]
    Singular,
}

/// Lowercase word and punctuation tokens used by all n-gram metrics.
pub fn report_tokens(report: &str) -> Vec<String> {
    split_tokens(report)
}

/// Memoizes report embeddings; `None` marks an empty report.
pub struct EmbeddingCache<F> {
    embed: F,
    cache: HashMap<String, Option<Vec<f64>>>,
}

impl<F: FnMut(&str) -> Option<Vec<f64>>> EmbeddingCache<F> {
    pub fn new(embed: F) -> Self {
        Self {
            embed,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, text: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.cache.get(text) {
            return v.clone();
        }
        let v = (self.embed)(text);
        self.cache.insert(text.to_string(), v.clone());
        v
    }

    pub fn components(&mut self, candidate: &str, reference: &str) -> Components {
        let a = self.get(candidate);
        let b = self.get(reference);
        component_vector(candidate, reference, a.as_deref(), b.as_deref())
    }
}

/// Ordered `(metric, value)` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in &self.rows {
            let _ = writeln!(out, "{name},{v:.6}");
        }
        out
    }
}

/// Corpus means of every metric. RadCliQ rows are included when weights
/// are given; component means are always reported.
pub fn evaluate<F: FnMut(&str) -> Option<Vec<f64>>>(
    candidates: &[String],
    references: &[String],
    embeddings: &mut EmbeddingCache<F>,
    weights: Option<&RadCliqWeights>,
) -> Result<MetricReport, MetricError> {
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = candidates.len() as f64;
    let mut sums = [0.0; 3];
    let mut comp_sum = [0.0; 4];
    let mut radcliq_sum = 0.0;
    let mut pred = Vec::with_capacity(candidates.len());
    let mut truth = Vec::with_capacity(candidates.len());
    for (c, r) in candidates.iter().zip(references) {
        let (ct, rt) = (report_tokens(c), report_tokens(r));
        sums[0] += bleu4(&ct, &rt);
        sums[1] += rouge_l(&ct, &rt);
        sums[2] += meteor_simple(&ct, &rt);
        pred.push(extract_labels(c));
        truth.push(extract_labels(r));
        let comp = embeddings.components(c, r);
        for (s, x) in comp_sum.iter_mut().zip(comp.as_array()) {
            *s += x;
        }
        if let Some(w) = weights {
            radcliq_sum += w.score(&comp);
        }
    }
    let ce = ce_prf(&pred, &truth)?;
    let mut rows = vec![
        ("bleu4".to_string(), sums[0] / n),
        ("rouge_l".to_string(), sums[1] / n),
        ("meteor".to_string(), sums[2] / n),
        ("ce_precision".to_string(), ce.precision),
        ("ce_recall".to_string(), ce.recall),
        ("ce_f1".to_string(), ce.f1),
    ];
    if weights.is_some() {
        rows.push(("radcliq".to_string(), radcliq_sum / n));
    }
    for (name, s) in radcliq::COMPONENT_NAMES.iter().zip(comp_sum) {
        rows.push((format!("radcliq_{name}"), s / n));
    }
    Ok(MetricReport { rows })
}
