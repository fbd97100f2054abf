//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LMRRG1"  u32 version
//! u32 len + config text        u32 len + vocabulary text
//! u32 len + region TSV         u8 has_weights [+ 5 × f64 intercept, coefs]
//! u32 tensor count, then per tensor: u32 len + name, u32 ndim, ndim × u64 dims, u64 count
//! u64 payload length, then that many f32 values in manifest order
//! ```

use std::path::Path;

use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::metrics::RadCliqWeights;
use crate::model::{Model, ModelError};
use crate::params::ParamStore;
use crate::regions::{RegionError, RegionSet};
use crate::text::{TextError, Vocabulary};
use rrg_autodiff::Tensor;

pub const MAGIC: &[u8; 6] = b"LMRRG1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("offset 0: bad magic, not a checkpoint")]
    BadMagic,
    #[error("offset 6: unsupported format version {0}")]
    Version(u32),
    #[error("offset {offset}: file truncated, {needed} more bytes expected")]
    Truncated { offset: usize, needed: usize },
    #[error("offset {offset}: {reason}")]
    Inconsistent { offset: usize, reason: String },
    #[error("stored config is invalid: {0}")]
    Config(#[from] ConfigError),
    #[error("stored vocabulary is invalid: {0}")]
    Vocab(#[from] TextError),
    #[error("stored regions are invalid: {0}")]
    Regions(#[from] RegionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: Vocabulary,
    pub regions: RegionSet,
    pub weights: Option<RadCliqWeights>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &Config, weights: Option<RadCliqWeights>) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            config,
            vocab: model.vocab.clone(),
            regions: model.regions.clone(),
            weights,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<(Model, Config, Option<RadCliqWeights>), CheckpointError> {
        let model = Model::with_params(self.config.model.clone(), self.vocab, self.regions, self.params)?;
        Ok((model, self.config, self.weights))
    }

    /// Serializes with parameters stored as 32-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for text in [self.config.to_text(), self.vocab.to_text(), self.regions.to_tsv()] {
            put_bytes(&mut out, text.as_bytes());
        }
        match &self.weights {
            Some(w) => {
                out.push(1);
                for x in std::iter::once(w.intercept).chain(w.coefs) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.numel() as u64).to_le_bytes());
        for (_, t) in self.params.iter() {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = Config::parse(&r.text()?)?;
        let vocab = Vocabulary::from_text(&r.text()?)?;
        let regions = RegionSet::parse(&r.text()?, config.model.regions)?;
        let flag_at = r.pos;
        let weights = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut v = [0.0; 5];
                for x in &mut v {
                    *x = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
                Some(RadCliqWeights {
                    intercept: v[0],
                    coefs: [v[1], v[2], v[3], v[4]],
                })
            }
            f => {
                return Err(CheckpointError::Inconsistent {
                    offset: flag_at,
                    reason: format!("weights flag {f} is neither 0 nor 1"),
                })
            }
        };
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        let mut total = 0usize;
        for _ in 0..count {
            let name = r.text()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let at = r.pos;
            let n = r.u64()? as usize;
            if shape.iter().product::<usize>() != n {
                return Err(CheckpointError::Inconsistent {
                    offset: at,
                    reason: format!("tensor {name}: shape {shape:?} does not hold {n} values"),
                });
            }
            total += n;
            manifest.push((name, shape, n));
        }
        let at = r.pos;
        let payload = r.u64()? as usize;
        if payload != total {
            return Err(CheckpointError::Inconsistent {
                offset: at,
                reason: format!("payload holds {payload} values, manifest lists {total}"),
            });
        }
        let mut params = ParamStore::new();
        for (name, shape, n) in manifest {
            let data: Vec<f64> = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::Inconsistent {
                offset: r.pos,
                reason: e.to_string(),
            })?;
            params.add(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Inconsistent {
                offset: r.pos,
                reason: format!("{} trailing bytes after payload", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            config,
            vocab,
            regions,
            weights,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Inconsistent {
            offset: at,
            reason: "invalid UTF-8 text".into(),
        })
    }
}
