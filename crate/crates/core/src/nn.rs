//! Transformer building blocks expressed on the tape.

use rand::Rng;
use rrg_autodiff::{AttnMask, Tensor, TensorError, Var};

use crate::params::{Graph, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/d_in)`, bias zero.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add_normal(rng, format!("{name}.weight"), d_in, d_out, (1.0 / d_in as f64).sqrt());
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with bias-free `D×D`
/// projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let std = (1.0 / dim as f64).sqrt();
        let mut proj = |suffix: &str| store.add_normal(rng, format!("{name}.{suffix}"), dim, dim, std);
        Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            heads,
            dim,
        }
    }

    /// Queries come from `q_in`, keys and values from `kv_in`; rows are
    /// split into `groups` independent blocks.
    pub fn forward(&self, g: &mut Graph, q_in: Var, kv_in: Var, groups: usize, mask: AttnMask) -> Result<Var, TensorError> {
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.tape.matmul(q_in, wq)?;
        let k = g.tape.matmul(kv_in, wk)?;
        let v = g.tape.matmul(kv_in, wv)?;
        let a = if self.heads == 1 {
            g.tape.attention(q, k, v, groups, mask)?
        } else {
            let dh = self.dim / self.heads;
            let mut outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.tape.slice_cols(q, h * dh, dh)?;
                let kh = g.tape.slice_cols(k, h * dh, dh)?;
                let vh = g.tape.slice_cols(v, h * dh, dh)?;
                outs.push(g.tape.attention(qh, kh, vh, groups, mask)?);
            }
            g.tape.concat_cols(&outs)?
        };
        g.tape.matmul(a, wo)
    }
}

/// Position-wise `D → 4D → D` network with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, 4 * dim, true),
            down: Linear::new(store, rng, &format!("{name}.down"), 4 * dim, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention and feed-forward sublayers, each residual.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, groups: usize, mask: AttnMask) -> Result<Var, TensorError> {
        let h = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, groups, mask)?;
        let x = g.tape.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.tape.add(x, f)
    }

    /// Parameters whose zeroing turns the layer into the identity.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.attn.wo, self.ffn.down.weight];
        ids.extend(self.ffn.down.bias);
        ids
    }
}

/// Repeats `x` (`n×D`) `times` times along rows.
pub fn tile_rows(g: &mut Graph, x: Var, times: usize) -> Result<Var, TensorError> {
    if times == 1 {
        return Ok(x);
    }
    g.tape.concat_rows(&vec![x; times])
}

/// Sets every listed parameter to zero.
pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}
