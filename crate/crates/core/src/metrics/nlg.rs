//! Sentence-level BLEU-4, ROUGE-L and an exact-match METEOR.

use std::collections::HashMap;
use std::hash::Hash;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 with uniform weights. Add-one smoothing of the 2- to 4-gram
/// precisions is off unless `smooth` is set; without it any zero precision
/// makes the score 0.
pub fn bleu4_with<T: Hash + Eq>(candidate: &[T], reference: &[T], smooth: bool) -> f64 {
    let c = candidate.len();
    let r = reference.len();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let matched: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let total = c.saturating_sub(n - 1);
        let (num, den) = if smooth && n > 1 {
            (matched as f64 + 1.0, total as f64 + 1.0)
        } else {
            (matched as f64, total as f64)
        };
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln() / 4.0;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * log_sum.exp()
}

pub fn bleu4<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> f64 {
    bleu4_with(candidate, reference, false)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure `(1+β²)PR/(R+β²P)` from the LCS.
pub fn rouge_l_with<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_with(candidate, reference, ROUGE_BETA)
}

pub const METEOR_ALPHA: f64 = 0.9;

/// Exact-match alignment: each candidate token is matched to the earliest
/// unused equal reference token. Returns the aligned reference index per
/// matched candidate position, in candidate order.
pub fn exact_alignment<T: PartialEq>(candidate: &[T], reference: &[T]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, c) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *c) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Number of runs of alignment pairs adjacent in both sequences.
pub fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// `F·(1 − 0.5·(chunks/matches)³)` with `F = PR/(αP + (1−α)R)`.
pub fn meteor_simple<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let pairs = exact_alignment(candidate, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let frag = chunk_count(&pairs) as f64 / m as f64;
    f * (1.0 - 0.5 * frag.powi(3))
}
