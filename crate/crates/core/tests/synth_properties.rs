//! Properties of the synthetic corpus generator and the corruption model.

use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use rrg_core::grammar::{self, Mention, FINDINGS};
use rrg_core::metrics::clinical::label_similarity;
use rrg_core::synth::{corrupt_sample, gen_corpus, gen_sample, sample_with_labels, write_corpus, SynthConfig, SynthError};

fn findings_changed(a: &str, b: &str) -> BTreeSet<usize> {
    let (ta, tb) = (grammar::parse_report(a), grammar::parse_report(b));
    (0..FINDINGS.len())
        .filter(|&i| {
            let fa: BTreeSet<_> = ta.iter().filter(|t| t.finding == i).collect();
            let fb: BTreeSet<_> = tb.iter().filter(|t| t.finding == i).collect();
            fa != fb
        })
        .collect()
}

#[test]
fn label_marginals_match_prevalence() {
    let cfg = SynthConfig::default();
    let n = 1000;
    let mut positives = [0usize; 5];
    let mut negated = 0usize;
    let mut negatives = 0usize;
    for seed in 0..n {
        let s = gen_sample(seed, &cfg).unwrap();
        let mentions = grammar::mentions_of(&s.report);
        for (i, &on) in s.labels.iter().enumerate() {
            positives[i] += usize::from(on);
            if !on {
                negatives += 1;
                negated += usize::from(mentions[i] == Mention::Negated);
            }
        }
    }
    for (i, &p) in positives.iter().enumerate() {
        let rate = p as f64 / n as f64;
        assert!((rate - cfg.prevalence).abs() <= 0.05, "{}: {rate}", FINDINGS[i].name);
    }
    let neg_rate = negated as f64 / negatives as f64;
    assert!((neg_rate - cfg.negation_prob).abs() <= 0.05, "negation rate {neg_rate}");
}

#[test]
fn each_corruption_edits_exactly_one_finding() {
    let cfg = SynthConfig::default();
    for seed in 0..300 {
        let s = gen_sample(seed, &cfg).unwrap();
        let k = 1 + (seed as usize % FINDINGS.len());
        let c = corrupt_sample(&s, k, seed + 7).unwrap();
        assert_eq!(c.corruption_count, k);
        assert_eq!(findings_changed(&s.report, &c.report).len(), k, "{} -> {}", s.report, c.report);
        assert_eq!(c.image, s.image);
    }
}

#[test]
fn label_similarity_counts_flipped_findings() {
    let cfg = SynthConfig::default();
    for seed in 0..300 {
        let s = gen_sample(seed, &cfg).unwrap();
        let c = corrupt_sample(&s, 1 + seed as usize % 3, seed).unwrap();
        let before = grammar::mentions_of(&s.report);
        let after = grammar::mentions_of(&c.report);
        let present = |m: &Mention| matches!(m, Mention::Present { .. });
        let flips = before.iter().zip(&after).filter(|(a, b)| present(a) != present(b)).count();
        let expected = 1.0 - flips as f64 / FINDINGS.len() as f64;
        assert!((label_similarity(&s.labels, &c.labels) - expected).abs() < 1e-15);
    }
}

#[test]
fn corruption_arguments_are_validated() {
    let s = gen_sample(1, &SynthConfig::default()).unwrap();
    assert!(matches!(corrupt_sample(&s, 0, 1), Err(SynthError::NoErrors)));
    assert!(matches!(corrupt_sample(&s, 6, 1), Err(SynthError::TooManyErrors { .. })));
}

#[test]
fn all_negative_noise_free_image_is_uniform_background() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let s = sample_with_labels(&[false; 5], 3, &cfg);
    let bg = s.image.pixels[0];
    assert!((bg - cfg.background).abs() <= 0.5 / 255.0);
    assert!(s.image.pixels.iter().all(|&p| p == bg));
    let positive = sample_with_labels(&[false, false, true, false, false], 3, &cfg);
    assert!(positive.image.pixels.iter().any(|&p| p > bg + 0.3));
}

#[test]
fn small_corpus_split_sizes() {
    let c = gen_corpus(10, [0.8, 0.1, 0.1], 7, &SynthConfig::default()).unwrap();
    let sizes: Vec<usize> = c.splits.iter().map(Vec::len).collect();
    assert_eq!(sizes, [8, 1, 1]);
}

#[test]
fn no_report_occurs_in_two_splits() {
    let c = gen_corpus(500, [0.8, 0.1, 0.1], 3, &SynthConfig::default()).unwrap();
    let sets: Vec<BTreeSet<&str>> = c
        .splits
        .iter()
        .map(|s| s.iter().map(|x| x.report.as_str()).collect())
        .collect();
    for a in 0..3 {
        for b in a + 1..3 {
            assert!(sets[a].is_disjoint(&sets[b]), "splits {a} and {b} share reports");
        }
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let cfg = SynthConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let c = gen_corpus(60, [0.8, 0.1, 0.1], 11, &cfg).unwrap();
        write_corpus(&c, d.path()).unwrap();
    }
    let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(x.len(), 60 + 4);
    assert!(x == y);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_are_deterministic_and_parseable(seed in any::<u64>()) {
        let cfg = SynthConfig::default();
        let a = gen_sample(seed, &cfg).unwrap();
        let b = gen_sample(seed, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(grammar::extract_labels(&a.report), a.labels);
    }

    #[test]
    fn corruption_count_is_respected(seed in any::<u64>(), k in 1usize..=5) {
        let s = gen_sample(seed, &SynthConfig::default()).unwrap();
        let c = corrupt_sample(&s, k, seed ^ 1).unwrap();
        prop_assert_eq!(findings_changed(&s.report, &c.report).len(), k);
        prop_assert_eq!(grammar::extract_labels(&c.report), c.labels);
    }
}
