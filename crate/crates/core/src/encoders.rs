//! Small text and image encoders producing region-description features and
//! patch features.

use rand::Rng;
use rrg_autodiff::{AttnMask, Var};

use crate::model::ModelError;
use crate::nn::{tile_rows, Linear, TransformerLayer};
use crate::params::{Graph, ParamId, ParamStore};

/// Token embedding, learned positions, self-attention layers and mean
/// pooling to a single `1×D` row.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, vocab: usize, dim: usize, layers: usize, heads: usize, max_len: usize) -> Self {
        Self {
            token_embedding: store.add_normal(rng, "text.token_embedding", vocab, dim, 0.1),
            positions: store.add_normal(rng, "text.positions", max_len, dim, 0.1),
            layers: (0..layers)
                .map(|l| TransformerLayer::new(store, rng, &format!("text.layer{l}"), dim, heads))
                .collect(),
            max_len,
        }
    }

    /// Encodes token ids (truncated to `max_len`) into a `1×D` feature.
    pub fn encode(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let ids = &ids[..ids.len().min(self.max_len)];
        let table = g.param(self.token_embedding);
        let tok = g.tape.embed(table, ids)?;
        let pos = g.param(self.positions);
        let pos = g.tape.slice_rows(pos, 0, ids.len())?;
        let mut x = g.tape.add(tok, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x, 1, AttnMask::Full)?;
        }
        Ok(g.tape.mean_rows(x, ids.len())?)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(TransformerLayer::output_params).collect()
    }
}

/// Patch projection, learned positions and self-attention layers.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub projection: Linear,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub tokens: usize,
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, patch: usize, tokens: usize, dim: usize, layers: usize, heads: usize) -> Self {
        Self {
            projection: Linear::new(store, rng, "image.projection", patch * patch, dim, true),
            positions: store.add_normal(rng, "image.positions", tokens, dim, 0.1),
            layers: (0..layers)
                .map(|l| TransformerLayer::new(store, rng, &format!("image.layer{l}"), dim, heads))
                .collect(),
            tokens,
        }
    }

    /// Projects the patch rows of `batch` images stacked as
    /// `(batch·N)×P²` to `(batch·N)×D` before any attention layer.
    pub fn project(&self, g: &mut Graph, patches: Var, batch: usize) -> Result<Var, ModelError> {
        let x = self.projection.forward(g, patches)?;
        let pos = g.param(self.positions);
        let pos = tile_rows(g, pos, batch)?;
        Ok(g.tape.add(x, pos)?)
    }

    /// Full encoder: `(batch·N)×P²` patches to `(batch·N)×D` features.
    pub fn encode(&self, g: &mut Graph, patches: Var, batch: usize) -> Result<Var, ModelError> {
        let mut x = self.project(g, patches, batch)?;
        for layer in &self.layers {
            x = layer.forward(g, x, batch, AttnMask::Full)?;
        }
        Ok(x)
    }
}
