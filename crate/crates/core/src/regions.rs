//! Anatomical region descriptions used as extraction prompts.

use thiserror::Error;

/// Descriptions of the 29 default chest X-ray regions, one
/// `name<TAB>description` record per line.
pub const DEFAULT_REGIONS_TSV: &str = include_str!("../data/regions.tsv");

#[derive(Debug, Error, PartialEq)]
pub enum RegionError {
    #[error("region file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("expected {expected} regions, found {found}")]
    WrongCount { expected: usize, found: usize },
}

/// One region prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub description: String,
}

/// Ordered region prompts; row `k` of every region feature matrix belongs
/// to `regions[k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    regions: Vec<Region>,
}

impl RegionSet {
    /// Parses exactly `expected` records.
    pub fn parse(text: &str, expected: usize) -> Result<Self, RegionError> {
        let mut regions = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (name, description) = line.split_once('\t').ok_or_else(|| RegionError::Malformed {
                line: i + 1,
                reason: "missing tab separator".into(),
            })?;
            if name.trim().is_empty() || description.trim().is_empty() {
                return Err(RegionError::Malformed {
                    line: i + 1,
                    reason: "empty name or description".into(),
                });
            }
            regions.push(Region {
                name: name.to_string(),
                description: description.to_string(),
            });
        }
        if regions.len() != expected {
            return Err(RegionError::WrongCount {
                expected,
                found: regions.len(),
            });
        }
        Ok(Self { regions })
    }

    /// The shipped 29-region set.
    pub fn default_set() -> Self {
        Self::parse(DEFAULT_REGIONS_TSV, 29).expect("shipped region file is valid")
    }

    /// The first `k` regions of the shipped set.
    pub fn default_prefix(k: usize) -> Result<Self, RegionError> {
        let all = Self::default_set();
        if k == 0 || k > all.len() {
            return Err(RegionError::WrongCount {
                expected: k,
                found: all.len(),
            });
        }
        Ok(Self {
            regions: all.regions[..k].to_vec(),
        })
    }

    /// Replaces every description by the bare region name.
    pub fn names_only(&self) -> Self {
        Self {
            regions: self
                .regions
                .iter()
                .map(|r| Region {
                    name: r.name.clone(),
                    description: r.name.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter()
    }

    pub fn get(&self, k: usize) -> &Region {
        &self.regions[k]
    }

    pub fn to_tsv(&self) -> String {
        self.regions
            .iter()
            .map(|r| format!("{}\t{}\n", r.name, r.description))
            .collect()
    }
}
