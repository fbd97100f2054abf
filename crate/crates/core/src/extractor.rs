//! Text-prompted region feature extraction.
//!
//! Each repeat of the region block applies, with pre-norm residuals,
//! cross-attention from the image tokens to one region-description feature,
//! self-attention among the image tokens, and a feed-forward network. All
//! regions share the block weights and are processed as independent row
//! groups of one batched computation.

use rand::Rng;
use rrg_autodiff::{AttnMask, Var};

use crate::model::ModelError;
use crate::nn::{tile_rows, Attention, FeedForward, LayerNorm};
use crate::params::{Graph, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct RegionBlock {
    pub ln_cross: LayerNorm,
    pub cross: Attention,
    pub ln_self: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl RegionBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross: Attention::new(store, rng, &format!("{name}.cross"), dim, heads),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim),
        }
    }

    /// `x` holds `groups` blocks of image-token rows; `text` holds one
    /// description feature per block.
    pub fn forward(&self, g: &mut Graph, x: Var, text: Var, groups: usize) -> Result<Var, ModelError> {
        let h = self.ln_cross.forward(g, x)?;
        let ca = self.cross.forward(g, h, text, groups, AttnMask::Full)?;
        let x = g.tape.add(ca, x)?;
        let h = self.ln_self.forward(g, x)?;
        let sa = self.attn.forward(g, h, h, groups, AttnMask::Full)?;
        let x = g.tape.add(sa, x)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        Ok(g.tape.add(f, x)?)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.cross.wo, self.attn.wo, self.ffn.down.weight];
        ids.extend(self.ffn.down.bias);
        ids
    }
}

/// `R` region blocks, each with its own weights.
#[derive(Clone, Debug)]
pub struct RegionExtractor {
    pub blocks: Vec<RegionBlock>,
}

impl RegionExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, heads: usize, repeats: usize) -> Self {
        assert!(repeats >= 1, "at least one region block repeat");
        Self {
            blocks: (0..repeats)
                .map(|r| RegionBlock::new(store, rng, &format!("extractor.block{r}"), dim, heads))
                .collect(),
        }
    }

    /// Region features for a batch.
    ///
    /// `image` is `(batch·N)×D`, `text` is `K×D`; the result is
    /// `(batch·K)×D`, sample-major then in region order.
    pub fn extract(&self, g: &mut Graph, image: Var, text: Var, batch: usize) -> Result<Var, ModelError> {
        let (rows, _) = dims(g, image);
        let (k, _) = dims(g, text);
        if k == 0 || batch == 0 || rows % batch != 0 {
            return Err(ModelError::Shape(format!(
                "extract: {rows} image rows for batch {batch}, {k} regions"
            )));
        }
        let n = rows / batch;
        let mut per_region = Vec::with_capacity(batch * k);
        for b in 0..batch {
            let fi = if batch == 1 { image } else { g.tape.slice_rows(image, b * n, n)? };
            per_region.extend(std::iter::repeat_n(fi, k));
        }
        let mut x = if per_region.len() == 1 {
            per_region[0]
        } else {
            g.tape.concat_rows(&per_region)?
        };
        let text = tile_rows(g, text, batch)?;
        for block in &self.blocks {
            x = block.forward(g, x, text, batch * k)?;
        }
        Ok(g.tape.mean_rows(x, n)?)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(RegionBlock::output_params).collect()
    }
}

/// Mean of the `N` image-token rows of each sample: `(batch·N)×D → batch×D`.
pub fn global_feature(g: &mut Graph, image: Var, batch: usize) -> Result<Var, ModelError> {
    let (rows, _) = dims(g, image);
    if batch == 0 || rows % batch != 0 {
        return Err(ModelError::Shape(format!("global_feature: {rows} rows for batch {batch}")));
    }
    Ok(g.tape.mean_rows(image, rows / batch)?)
}

fn dims(g: &Graph, v: Var) -> (usize, usize) {
    let s = g.tape.shape(v);
    (s[0], s[s.len() - 1])
}
