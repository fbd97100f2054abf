//! Template grammar of the synthetic reports and its exact parser.
//!
//! Every report is a sequence of sentences in fixed finding order. A
//! positive finding reads `there is <phrase> in the <region>.`; a negated
//! finding reads `no <name>.`, except fractures, which read
//! `the spine is intact without fracture.`. A report with no mentioned
//! finding reads `no acute cardiopulmonary process.`.

use std::collections::BTreeSet;

/// One disease label with its phrasing and canonical location.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Finding {
    pub name: &'static str,
    /// Noun phrase used in positive sentences.
    pub phrase: &'static str,
    pub region: &'static str,
    /// Plausible wrong location used by region-swap corruptions.
    pub swap_region: &'static str,
}

pub const FINDINGS: [Finding; 5] = [
    Finding {
        name: "pneumothorax",
        phrase: "a pneumothorax",
        region: "right lung",
        swap_region: "left lung",
    },
    Finding {
        name: "consolidation",
        phrase: "consolidation",
        region: "left lung",
        swap_region: "right lung",
    },
    Finding {
        name: "cardiomegaly",
        phrase: "cardiomegaly",
        region: "cardiac silhouette",
        swap_region: "mediastinum",
    },
    Finding {
        name: "pleural effusion",
        phrase: "a pleural effusion",
        region: "left costophrenic angle",
        swap_region: "right costophrenic angle",
    },
    Finding {
        name: "fracture",
        phrase: "a fracture",
        region: "spine",
        swap_region: "right clavicle",
    },
];

pub const NORMAL_SENTENCE: &str = "no acute cardiopulmonary process.";

/// `(finding, region, polarity)` entity triple. Negations of findings
/// other than fracture carry no region.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub finding: usize,
    pub region: Option<String>,
    pub positive: bool,
}

impl Triple {
    pub fn positive(finding: usize, region: &str) -> Self {
        Self {
            finding,
            region: Some(region.to_string()),
            positive: true,
        }
    }

    /// The negation sentence's triple for `finding`.
    pub fn negative(finding: usize) -> Self {
        Self {
            finding,
            region: (FINDINGS[finding].name == "fracture").then(|| FINDINGS[finding].region.to_string()),
            positive: false,
        }
    }
}

/// State of one finding in a report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mention {
    Unmentioned,
    Negated,
    Present { region: String },
}

pub fn sentence(finding: usize, mention: &Mention) -> Option<String> {
    let f = &FINDINGS[finding];
    match mention {
        Mention::Unmentioned => None,
        Mention::Negated if f.name == "fracture" => Some(format!("the {} is intact without {}.", f.region, f.name)),
        Mention::Negated => Some(format!("no {}.", f.name)),
        Mention::Present { region } => Some(format!("there is {} in the {region}.", f.phrase)),
    }
}

/// Renders one mention per finding in label order.
pub fn render(mentions: &[Mention]) -> String {
    let parts: Vec<String> = mentions
        .iter()
        .enumerate()
        .filter_map(|(i, m)| sentence(i, m))
        .collect();
    if parts.is_empty() {
        NORMAL_SENTENCE.to_string()
    } else {
        parts.join(" ")
    }
}

fn finding_by_name(name: &str) -> Option<usize> {
    FINDINGS.iter().position(|f| f.name == name)
}

fn finding_by_phrase(phrase: &str) -> Option<usize> {
    FINDINGS
        .iter()
        .position(|f| f.phrase == phrase || f.name == phrase)
}

/// Parses one sentence (without its final period).
pub fn parse_sentence(s: &str) -> Option<Triple> {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix("there is ") {
        let (phrase, region) = rest.split_once(" in the ")?;
        let finding = finding_by_phrase(phrase.trim())?;
        let region = region.trim();
        if region.is_empty() {
            return None;
        }
        return Some(Triple::positive(finding, region));
    }
    if let Some((before, name)) = s.split_once(" without ") {
        let finding = finding_by_name(name.trim())?;
        let region = before.strip_prefix("the ")?.strip_suffix(" is intact")?.trim();
        return Some(Triple {
            finding,
            region: Some(region.to_string()),
            positive: false,
        });
    }
    if let Some(name) = s.strip_prefix("no ") {
        let finding = finding_by_name(name.trim())?;
        return Some(Triple {
            finding,
            region: None,
            positive: false,
        });
    }
    None
}

/// Entity triples of every parseable sentence. Input is normalized to
/// lowercase with canonical punctuation spacing first.
pub fn parse_report(report: &str) -> BTreeSet<Triple> {
    crate::text::normalize(report)
        .split('.')
        .filter_map(parse_sentence)
        .collect()
}

/// Label vector: positive iff some un-negated mention exists and no
/// explicit negation of the same finding does.
pub fn labels_from_triples(triples: &BTreeSet<Triple>) -> Vec<bool> {
    (0..FINDINGS.len())
        .map(|i| {
            let pos = triples.iter().any(|t| t.finding == i && t.positive);
            let neg = triples.iter().any(|t| t.finding == i && !t.positive);
            pos && !neg
        })
        .collect()
}

pub fn extract_labels(report: &str) -> Vec<bool> {
    labels_from_triples(&parse_report(report))
}

/// Reconstructs per-finding mentions from a report. Findings with
/// conflicting or repeated mentions keep the first one.
pub fn mentions_of(report: &str) -> Vec<Mention> {
    let mut out = vec![Mention::Unmentioned; FINDINGS.len()];
    for t in crate::text::normalize(report).split('.').filter_map(parse_sentence) {
        if out[t.finding] == Mention::Unmentioned {
            out[t.finding] = if t.positive {
                Mention::Present {
                    region: t.region.unwrap_or_default(),
                }
            } else {
                Mention::Negated
            };
        }
    }
    out
}

/// Every word used by the grammar, for vocabulary construction.
pub fn grammar_sentences() -> Vec<String> {
    let mut out = vec![NORMAL_SENTENCE.to_string()];
    for (i, f) in FINDINGS.iter().enumerate() {
        out.push(sentence(i, &Mention::Negated).unwrap());
        for r in [f.region, f.swap_region] {
            out.push(sentence(i, &Mention::Present { region: r.into() }).unwrap());
        }
    }
    out
}
