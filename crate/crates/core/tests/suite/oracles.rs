//! Brute-force oracles for the text metrics and the report grammar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrg_core::grammar::{self, Triple, FINDINGS};
use rrg_core::metrics::clinical::ce_prf;
use rrg_core::metrics::nlg::{bleu4, rouge_l, ROUGE_BETA};
use rrg_core::synth::{gen_sample, SynthConfig};

pub const PAIRS: u64 = 100;
pub const GRAMMAR_SAMPLES: u64 = 1000;

pub type Check = fn() -> Result<(), String>;

pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("BLEU-4 equals the n-gram enumeration oracle", bleu_oracle),
        ("ROUGE-L equals the exhaustive LCS oracle", rouge_oracle),
        ("CE precision/recall/F1 equal the counting oracle", ce_oracle),
        ("generator and parser are exact inverses", grammar_inverse),
    ]
}

/// A random short token sequence, or an edited copy of `base` so that
/// higher-order n-grams overlap often.
fn short_pair(rng: &mut ChaCha8Rng) -> (Vec<&'static str>, Vec<&'static str>) {
    const WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];
    let word = |rng: &mut ChaCha8Rng| WORDS[rng.random_range(0..WORDS.len())];
    let reference: Vec<&str> = (0..rng.random_range(1..=8)).map(|_| word(rng)).collect();
    let candidate = if rng.random_bool(0.5) {
        (0..rng.random_range(1..=8)).map(|_| word(rng)).collect()
    } else {
        let mut c = reference.clone();
        for _ in 0..rng.random_range(0..=2) {
            match rng.random_range(0..3) {
                0 if !c.is_empty() => {
                    let i = rng.random_range(0..c.len());
                    c[i] = word(rng);
                }
                1 if c.len() > 1 => {
                    c.remove(rng.random_range(0..c.len()));
                }
                _ => {
                    let i = rng.random_range(0..=c.len());
                    c.insert(i, word(rng));
                }
            }
        }
        c
    };
    (candidate, reference)
}

fn occurrences(seq: &[&str], gram: &[&str]) -> usize {
    (0..seq.len().saturating_sub(gram.len() - 1))
        .filter(|&i| seq[i..i + gram.len()] == *gram)
        .count()
}

fn oracle_bleu(c: &[&str], r: &[&str]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        if c.len() < n {
            return 0.0;
        }
        let mut matched = 0;
        for i in 0..=c.len() - n {
            let gram = &c[i..i + n];
            let first = (0..i).all(|j| c[j..j + n] != *gram);
            if first {
                matched += occurrences(c, gram).min(occurrences(r, gram));
            }
        }
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / (c.len() - n + 1) as f64).ln() / 4.0;
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * log_sum.exp()
}

/// LCS length by exhaustive recursion over both sequences.
fn oracle_lcs(a: &[&str], b: &[&str]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + oracle_lcs(ra, rb)
            } else {
                oracle_lcs(ra, b).max(oracle_lcs(a, rb))
            }
        }
        _ => 0,
    }
}

fn bleu_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut nonzero = 0;
    for i in 0..PAIRS {
        let (c, r) = short_pair(&mut rng);
        let (got, want) = (bleu4(&c, &r), oracle_bleu(&c, &r));
        if got != want {
            return Err(format!("pair {i} {c:?} / {r:?}: {got} vs oracle {want}"));
        }
        nonzero += usize::from(want > 0.0);
    }
    if nonzero < 20 {
        return Err(format!("only {nonzero} pairs with nonzero BLEU-4"));
    }
    Ok(())
}

fn rouge_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for i in 0..PAIRS {
        let (c, r) = short_pair(&mut rng);
        let l = oracle_lcs(&c, &r) as f64;
        let want = if l == 0.0 {
            0.0
        } else {
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        };
        let got = rouge_l(&c, &r);
        if got != want {
            return Err(format!("pair {i} {c:?} / {r:?}: {got} vs oracle {want}"));
        }
    }
    Ok(())
}

fn ce_oracle() -> Result<(), String> {
    let cfg = SynthConfig::default();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut sums = [0.0; 3];
    for i in 0..PAIRS {
        let p = gen_sample(2 * i, &cfg).map_err(|e| e.to_string())?;
        let t = gen_sample(2 * i + 1, &cfg).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&a, &b) in p.labels.iter().zip(&t.labels) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let (prec, rec, f1) = match (tp + fp, tp + fn_) {
            (0, 0) => (1.0, 1.0, 1.0),
            (0, _) | (_, 0) => (0.0, 0.0, 0.0),
            (np, nt) => {
                let (pr, rc) = (tp as f64 / np as f64, tp as f64 / nt as f64);
                let f = if tp == 0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) };
                (pr, rc, f)
            }
        };
        sums[0] += prec;
        sums[1] += rec;
        sums[2] += f1;
        predicted.push(grammar::extract_labels(&p.report));
        truth.push(grammar::extract_labels(&t.report));
    }
    let got = ce_prf(&predicted, &truth).map_err(|e| e.to_string())?;
    let n = PAIRS as f64;
    let want = [sums[0] / n, sums[1] / n, sums[2] / n];
    for (name, g, w) in [
        ("precision", got.precision, want[0]),
        ("recall", got.recall, want[1]),
        ("f1", got.f1, want[2]),
    ] {
        if (g - w).abs() > 1e-12 {
            return Err(format!("{name}: {g} vs oracle {w}"));
        }
    }
    Ok(())
}

fn grammar_inverse() -> Result<(), String> {
    let cfg = SynthConfig::default();
    for seed in 0..GRAMMAR_SAMPLES {
        let s = gen_sample(seed, &cfg).map_err(|e| e.to_string())?;
        let fail = |what: &str| Err(format!("seed {seed} ({:?}): {what}", s.report));
        if grammar::extract_labels(&s.report) != s.labels {
            return fail("parsed labels differ from generating labels");
        }
        let triples = grammar::parse_report(&s.report);
        let positives: Vec<Triple> = triples.iter().filter(|t| t.positive).cloned().collect();
        let expected: Vec<Triple> = (0..FINDINGS.len())
            .filter(|&i| s.labels[i])
            .map(|i| Triple::positive(i, FINDINGS[i].region))
            .collect();
        if positives != expected {
            return fail("positive triples differ from the generating findings");
        }
        if triples
            .iter()
            .any(|t| !t.positive && (s.labels[t.finding] || *t != Triple::negative(t.finding)))
        {
            return fail("negation triple for a present finding or with a wrong region");
        }
        let sentences = s.report.matches('.').count();
        let expected_sentences = if triples.is_empty() { 1 } else { triples.len() };
        if sentences != expected_sentences || (triples.is_empty() && s.report != grammar::NORMAL_SENTENCE) {
            return fail("a sentence was not parsed");
        }
        if grammar::render(&grammar::mentions_of(&s.report)) != s.report {
            return fail("re-rendering the parsed mentions changes the report");
        }
    }
    Ok(())
}
