//! Four-component report-quality composite with a fitted linear map
//! (lower is better).

use std::collections::BTreeSet;

use super::clinical::label_similarity;
use super::nlg::bleu4;
use super::{report_tokens, MetricError};
use crate::grammar::{labels_from_triples, parse_report, Triple};

pub const COMPONENT_NAMES: [&str; 4] = ["bleu", "embed_sim", "label_sim", "entity_f1"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Components {
    pub bleu: f64,
    /// Cosine similarity of the text-encoder features of both reports.
    pub embed_sim: f64,
    pub label_sim: f64,
    /// F1 overlap of `(finding, region, polarity)` triples.
    pub entity_f1: f64,
}

impl Components {
    pub fn as_array(&self) -> [f64; 4] {
        [self.bleu, self.embed_sim, self.label_sim, self.entity_f1]
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Embedding similarity where `None` stands for an empty report: two empty
/// reports are identical, one empty report is unrelated.
pub fn embedding_similarity(a: Option<&[f64]>, b: Option<&[f64]>) -> f64 {
    match (a, b) {
        (None, None) => 1.0,
        (Some(a), Some(b)) if a == b && a.iter().any(|&x| x != 0.0) => 1.0,
        (Some(a), Some(b)) => cosine(a, b),
        _ => 0.0,
    }
}

/// F1 between two triple sets; two empty sets agree perfectly.
pub fn entity_f1(a: &BTreeSet<Triple>, b: &BTreeSet<Triple>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let common = a.intersection(b).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    2.0 * common / (a.len() + b.len()) as f64
}

/// All four components given precomputed report embeddings.
pub fn component_vector(candidate: &str, reference: &str, cand_emb: Option<&[f64]>, ref_emb: Option<&[f64]>) -> Components {
    let ct = parse_report(candidate);
    let rt = parse_report(reference);
    Components {
        bleu: bleu4(&report_tokens(candidate), &report_tokens(reference)),
        embed_sim: embedding_similarity(cand_emb, ref_emb),
        label_sim: label_similarity(&labels_from_triples(&ct), &labels_from_triples(&rt)),
        entity_f1: entity_f1(&ct, &rt),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadCliqWeights {
    pub intercept: f64,
    pub coefs: [f64; 4],
}

impl RadCliqWeights {
    pub fn score(&self, c: &Components) -> f64 {
        self.intercept + self.coefs.iter().zip(c.as_array()).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        self.intercept.is_finite() && self.coefs.iter().all(|c| c.is_finite())
    }
}

pub fn radcliq_proxy(c: &Components, w: &RadCliqWeights) -> f64 {
    w.score(c)
}

pub const MIN_FIT_PAIRS: usize = 5;
pub const RIDGE: f64 = 1e-6;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` if a pivot is numerically zero.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Least-squares fit of error counts on the components plus an intercept.
/// A rank-deficient design falls back to a ridge penalty on the
/// coefficients.
pub fn fit_radcliq_weights(pairs: &[(Components, f64)]) -> Result<RadCliqWeights, MetricError> {
    if pairs.len() < MIN_FIT_PAIRS {
        return Err(MetricError::TooFewPairs {
            found: pairs.len(),
            required: MIN_FIT_PAIRS,
        });
    }
    let mut xtx = vec![vec![0.0; 5]; 5];
    let mut xty = vec![0.0; 5];
    for (c, y) in pairs {
        let row = [1.0, c.bleu, c.embed_sim, c.label_sim, c.entity_f1];
        for i in 0..5 {
            xty[i] += row[i] * y;
            for j in 0..5 {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    let beta = match solve(xtx.clone(), xty.clone()) {
        Some(b) => b,
        None => {
            log::warn!("rank-deficient fitting design, applying ridge {RIDGE}");
            for (i, row) in xtx.iter_mut().enumerate().skip(1) {
                row[i] += RIDGE;
            }
            solve(xtx, xty).ok_or(MetricError::Singular)?
        }
    };
    let w = RadCliqWeights {
        intercept: beta[0],
        coefs: [beta[1], beta[2], beta[3], beta[4]],
    };
    if !w.is_finite() {
        return Err(MetricError::Singular);
    }
    Ok(w)
}
