//! Visual transfer layers, the multimodal decoder, and the disease head.
//!
//! The decoder exists twice: once on the tape for training, and once as a
//! plain incremental decoder with a key/value cache for generation. Both
//! call the same numeric kernels.

use rand::Rng;
use rrg_autodiff::kernels;
use rrg_autodiff::{AttnMask, Tensor, Var};

use crate::model::ModelError;
use crate::nn::{LayerNorm, Linear, TransformerLayer, LN_EPS};
use crate::params::{Graph, ParamId, ParamStore};
use crate::text::{BOS, EOS, PAD, UNK};

/// Joint self-attention transformer over `[global; regions]` rows.
#[derive(Clone, Debug)]
pub struct VisualTransfer {
    pub layers: Vec<TransformerLayer>,
}

impl VisualTransfer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, heads: usize, layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| TransformerLayer::new(store, rng, &format!("vtrans.layer{l}"), dim, heads))
                .collect(),
        }
    }

    /// Maps stacked per-sample `(1+K)×D` blocks to blocks of the same shape.
    pub fn forward(&self, g: &mut Graph, joint: Var, batch: usize) -> Result<Var, ModelError> {
        let mut x = joint;
        for layer in &self.layers {
            x = layer.forward(g, x, batch, AttnMask::Full)?;
        }
        Ok(x)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(TransformerLayer::output_params).collect()
    }
}

/// Linear map from the flattened `(1+K)×D` visual rows to `C` logits.
#[derive(Clone, Debug)]
pub struct DiseaseHead {
    pub linear: Linear,
}

impl DiseaseHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, rows: usize, dim: usize, classes: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, "disease", rows * dim, classes, true),
        }
    }

    /// `joint` holds `batch` stacked `(1+K)×D` blocks; returns `batch×C`.
    pub fn forward(&self, g: &mut Graph, joint: Var, batch: usize) -> Result<Var, ModelError> {
        let s = g.tape.shape(joint).to_vec();
        let flat_len = s[0] * s[1] / batch;
        if flat_len != self.linear.d_in {
            return Err(ModelError::Shape(format!(
                "disease head expects {} features per sample, got {flat_len}",
                self.linear.d_in
            )));
        }
        let flat = g.tape.reshape(joint, &[batch, flat_len])?;
        self.linear.forward(g, flat)
            .map_err(ModelError::from)
    }
}

/// Causal transformer decoder over `[prompt rows ‖ token embeddings]`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_final: LayerNorm,
    pub output: Linear,
    pub prompt_len: usize,
    pub max_len: usize,
    pub dim: usize,
    pub vocab: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        vocab: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        prompt_len: usize,
        max_len: usize,
    ) -> Self {
        Self {
            token_embedding: store.add_normal(rng, "decoder.token_embedding", vocab, dim, 0.1),
            positions: store.add_normal(rng, "decoder.positions", prompt_len + max_len, dim, 0.1),
            layers: (0..layers)
                .map(|l| TransformerLayer::new(store, rng, &format!("decoder.layer{l}"), dim, heads))
                .collect(),
            ln_final: LayerNorm::new(store, "decoder.ln_final", dim),
            output: Linear::new(store, rng, "decoder.output", dim, vocab, true),
            prompt_len,
            max_len,
            dim,
            vocab,
        }
    }

    /// Embeds instruction tokens with the decoder's token table.
    pub fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, ModelError> {
        let table = g.param(self.token_embedding);
        Ok(g.tape.embed(table, ids)?)
    }

    /// Next-token logits (`|prefix|×V`) for every prefix position.
    pub fn logits(&self, g: &mut Graph, prompt: Var, prefix: &[usize]) -> Result<Var, ModelError> {
        let p0 = g.tape.shape(prompt)[0];
        if p0 != self.prompt_len {
            return Err(ModelError::Shape(format!(
                "prompt has {p0} rows, decoder expects {}",
                self.prompt_len
            )));
        }
        if prefix.is_empty() {
            return Err(ModelError::EmptyText);
        }
        if prefix.len() > self.max_len {
            return Err(ModelError::PrefixTooLong {
                len: prefix.len(),
                max: self.max_len,
            });
        }
        let t = prefix.len();
        let tok = self.embed_tokens(g, prefix)?;
        let x = g.tape.concat_rows(&[prompt, tok])?;
        let pos = g.param(self.positions);
        let pos = g.tape.slice_rows(pos, 0, p0 + t)?;
        let mut x = g.tape.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x, 1, AttnMask::PrefixCausal { prefix: p0 })?;
        }
        let x = g.tape.slice_rows(x, p0, t)?;
        let x = self.ln_final.forward(g, x)?;
        Ok(self.output.forward(g, x)?)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(TransformerLayer::output_params).collect()
    }

    /// Plain-value view of the decoder for incremental decoding.
    pub fn runner<'a>(&'a self, store: &'a ParamStore) -> DecoderRunner<'a> {
        DecoderRunner { dec: self, store }
    }
}

/// How the next token is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    /// Argmax, ties broken towards the lowest id.
    Greedy,
    /// Draw from `softmax(logits / temperature)`.
    Sample { temperature: f64 },
}

/// Output of autoregressive decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated ids, ending with `[EOS]` unless truncated at the length cap.
    pub tokens: Vec<usize>,
    /// Log-probability of each generated id under the full softmax at the
    /// decoding temperature (1 for greedy).
    pub log_probs: Vec<f64>,
}

impl Generation {
    /// Ids without the terminating `[EOS]`.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Key/value cache for one sequence.
#[derive(Clone, Debug)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    /// Number of positions consumed so far, prompt included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct DecoderRunner<'a> {
    dec: &'a Decoder,
    store: &'a ParamStore,
}

impl DecoderRunner<'_> {
    fn data(&self, id: ParamId) -> &[f64] {
        self.store.get(id).data()
    }

    fn layer_norm(&self, x: &[f64], ln: &LayerNorm) -> Vec<f64> {
        kernels::layer_norm_rows(x, self.dec.dim, self.data(ln.gain), self.data(ln.bias), LN_EPS)
    }

    fn linear(&self, x: &[f64], l: &Linear) -> Vec<f64> {
        let rows = x.len() / l.d_in;
        let mut out = kernels::matmul(rows, l.d_in, l.d_out, x, self.data(l.weight));
        if let Some(b) = l.bias {
            let b = self.data(b);
            for row in out.chunks_exact_mut(l.d_out) {
                row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
            }
        }
        out
    }

    fn project(&self, x: &[f64], w: ParamId) -> Vec<f64> {
        let d = self.dec.dim;
        kernels::matmul(x.len() / d, d, d, x, self.data(w))
    }

    /// Attention of `q` rows (global positions `first..`) over the cached
    /// keys/values; query `i` sees keys `0..visible(i)`.
    fn attend(&self, q: &[f64], keys: &[f64], values: &[f64], heads: usize, visible: impl Fn(usize) -> usize) -> Vec<f64> {
        let d = self.dec.dim;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; q.len()];
        let mut scores = Vec::new();
        for (i, (qr, orow)) in q.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            let n = visible(i);
            for h in 0..heads {
                let qh = &qr[h * dh..(h + 1) * dh];
                scores.clear();
                scores.extend((0..n).map(|j| {
                    let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale
                }));
                kernels::softmax_inplace(&mut scores);
                let oh = &mut orow[h * dh..(h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
                    oh.iter_mut().zip(vh).for_each(|(o, v)| *o += p * v);
                }
            }
        }
        out
    }

    /// Runs `x` (rows at positions `state.len..`) through every layer,
    /// appending to the cache; prompt rows see only the prompt.
    fn advance(&self, state: &mut DecodeState, mut x: Vec<f64>, prompt: bool) -> Vec<f64> {
        let d = self.dec.dim;
        let rows = x.len() / d;
        let start = state.len;
        let pos = self.data(self.dec.positions);
        x.iter_mut()
            .zip(&pos[start * d..(start + rows) * d])
            .for_each(|(a, p)| *a += p);
        for (l, layer) in self.dec.layers.iter().enumerate() {
            let h = self.layer_norm(&x, &layer.ln_attn);
            let q = self.project(&h, layer.attn.wq);
            state.keys[l].extend(self.project(&h, layer.attn.wk));
            state.values[l].extend(self.project(&h, layer.attn.wv));
            let visible = |i: usize| if prompt { start + rows } else { start + i + 1 };
            let a = self.attend(&q, &state.keys[l], &state.values[l], layer.attn.heads, visible);
            let a = self.project(&a, layer.attn.wo);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
            let h = self.layer_norm(&x, &layer.ln_ffn);
            let mut f = self.linear(&h, &layer.ffn.up);
            f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let f = self.linear(&f, &layer.ffn.down);
            x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
        }
        state.len += rows;
        x
    }

    /// Consumes the prompt rows (`P0×D`).
    pub fn start(&self, prompt: &Tensor) -> Result<DecodeState, ModelError> {
        if prompt.shape() != [self.dec.prompt_len, self.dec.dim] {
            return Err(ModelError::Shape(format!(
                "prompt shape {:?}, decoder expects [{}, {}]",
                prompt.shape(),
                self.dec.prompt_len,
                self.dec.dim
            )));
        }
        let n = self.dec.layers.len();
        let mut state = DecodeState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        };
        self.advance(&mut state, prompt.data().to_vec(), true);
        Ok(state)
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>, ModelError> {
        let generated = state.len - self.dec.prompt_len;
        if generated >= self.dec.max_len {
            return Err(ModelError::PrefixTooLong {
                len: generated + 1,
                max: self.dec.max_len,
            });
        }
        if token >= self.dec.vocab {
            return Err(ModelError::Shape(format!("token {token} outside vocabulary")));
        }
        let d = self.dec.dim;
        let emb = self.data(self.dec.token_embedding)[token * d..(token + 1) * d].to_vec();
        let x = self.advance(state, emb, false);
        let h = self.layer_norm(&x, &self.dec.ln_final);
        Ok(self.linear(&h, &self.dec.output))
    }

    /// Logits for every prefix position, computed one token at a time.
    pub fn prefix_logits(&self, prompt: &Tensor, prefix: &[usize]) -> Result<Tensor, ModelError> {
        let mut state = self.start(prompt)?;
        let mut out = Vec::with_capacity(prefix.len() * self.dec.vocab);
        for &t in prefix {
            out.extend(self.step(&mut state, t)?);
        }
        Ok(Tensor::new(&[prefix.len(), self.dec.vocab], out)?)
    }

    /// Per-position log-softmax of `logits / temperature` along the
    /// teacher-forced sequence `[BOS] ++ tokens[..T-1]`.
    pub fn sequence_log_probs(&self, prompt: &Tensor, tokens: &[usize], temperature: f64) -> Result<Tensor, ModelError> {
        let mut prefix = Vec::with_capacity(tokens.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
        let mut lp = self.prefix_logits(prompt, &prefix)?;
        for row in lp.data_mut().chunks_exact_mut(self.dec.vocab) {
            row.iter_mut().for_each(|v| *v /= temperature);
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(lp)
    }

    /// Autoregressive decoding from `[BOS]` for at most `max_len` tokens.
    /// `[PAD]`, `[BOS]` and `[UNK]` are never emitted.
    pub fn generate<R: Rng>(&self, prompt: &Tensor, mode: DecodeMode, max_len: usize, rng: &mut R) -> Result<Generation, ModelError> {
        let max_len = max_len.min(self.dec.max_len);
        let temperature = match mode {
            DecodeMode::Greedy => 1.0,
            DecodeMode::Sample { temperature } => temperature,
        };
        let mut state = self.start(prompt)?;
        let mut logits = self.step(&mut state, BOS)?;
        let mut out = Generation {
            tokens: Vec::new(),
            log_probs: Vec::new(),
        };
        while out.tokens.len() < max_len {
            logits.iter_mut().for_each(|v| *v /= temperature);
            let lse = kernels::log_sum_exp(&logits);
            let allowed = |id: usize| !matches!(id, PAD | BOS | UNK);
            let next = match mode {
                DecodeMode::Greedy => {
                    let mut best = EOS;
                    for id in 0..logits.len() {
                        if allowed(id) && logits[id] > logits[best] {
                            best = id;
                        }
                    }
                    best
                }
                DecodeMode::Sample { .. } => {
                    let total: f64 = (0..logits.len())
                        .filter(|&id| allowed(id))
                        .map(|id| (logits[id] - lse).exp())
                        .sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = EOS;
                    for id in (0..logits.len()).filter(|&id| allowed(id)) {
                        pick = id;
                        u -= (logits[id] - lse).exp();
                        if u <= 0.0 {
                            break;
                        }
                    }
                    pick
                }
            };
            out.tokens.push(next);
            out.log_probs.push(logits[next] - lse);
            if next == EOS || out.tokens.len() == max_len {
                break;
            }
            logits = self.step(&mut state, next)?;
        }
        Ok(out)
    }
}
