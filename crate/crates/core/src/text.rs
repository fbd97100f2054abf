//! Word-level vocabulary and tokenization.
//!
//! A word is a maximal run of alphanumeric characters, optionally joined by
//! single internal hyphens or apostrophes (`well-defined`, `heart's`). Every
//! other non-whitespace character is its own punctuation token. Text is
//! lowercased before splitting.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("vocabulary file line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
}

fn is_joiner(c: char) -> bool {
    matches!(c, '-' | '\'' | '\u{2019}')
}

/// Splits text into lowercase word and punctuation tokens.
pub fn split_tokens(s: &str) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if is_joiner(c)
            && !word.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        i += 1;
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | ";" | ":" | "?" | "!" | ")")
}

/// Joins tokens with single spaces, except that closing punctuation
/// attaches to the previous token and nothing follows `(` with a space.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_open = false;
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !attaches_left(t) && !prev_open {
            out.push(' ');
        }
        out.push_str(t);
        prev_open = t == "(";
    }
    out
}

/// Canonical form of a string: lowercase, tokenized and re-joined.
pub fn normalize(s: &str) -> String {
    join_tokens(&split_tokens(s))
}

/// Dense token table with the four reserved tokens at ids 0..=3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by every word of the corpus, sorted.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, TextError> {
        Self::build_with_min_freq(corpus, 1)
    }

    pub fn build_with_min_freq<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in corpus {
            for t in split_tokens(s.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let words = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !RESERVED.contains(&w.as_str()))
            .map(|(w, _)| w);
        Ok(Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words).collect()))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `s`; unknown words map to `[UNK]`. No `[BOS]`/`[EOS]`.
    pub fn tokenize(&self, s: &str) -> Vec<usize> {
        split_tokens(s)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Text of `ids` with reserved tokens dropped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String, TextError> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(TextError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if id > UNK {
                words.push(tok);
            }
        }
        Ok(join_tokens(&words))
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(TextError::BadVocabFile {
                    line: i + 1,
                    reason: format!("expected reserved token {r}"),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TextError::BadVocabFile {
                    line: i + 1,
                    reason: "empty token".into(),
                });
            }
            if seen.insert(t.as_str(), i).is_some() {
                return Err(TextError::BadVocabFile {
                    line: i + 1,
                    reason: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}
