//! Exact structural identities of the model blocks and the KL weight rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrg_autodiff::{AttnMask, Tensor};
use rrg_core::encoders::TextEncoder;
use rrg_core::extractor::{RegionBlock, RegionExtractor};
use rrg_core::generator::{Decoder, VisualTransfer};
use rrg_core::nn::{zero_params, TransformerLayer};
use rrg_core::params::{Graph, ParamStore};
use rrg_core::rl::adaptive_lambda;

const INSTANCES: u64 = 20;

pub type Check = fn() -> Result<(), String>;

pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("zeroed region block is the identity", region_block_identity),
        ("zeroed extractor pools image tokens", extractor_identity),
        ("zeroed transformer layer is the identity", transformer_identity),
        ("zeroed visual transfer is the identity", vtrans_identity),
        ("zeroed text encoder returns the token embedding", text_encoder_identity),
        ("future tokens never change earlier logits", causal_mask_exact),
        ("incremental decoding matches full decoding", incremental_matches_full),
        ("adaptive KL weight rule", adaptive_weight_rule),
    ]
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let heads = rng.random_range(1..=2);
    (heads * rng.random_range(2..=4), heads)
}

fn same(name: &str, seed: u64, got: &Tensor, want: &Tensor) -> Result<(), String> {
    if got.shape() != want.shape() || got.data() != want.data() {
        return Err(format!("{name} seed {seed}: output differs from the expected identity"));
    }
    Ok(())
}

fn region_block_identity() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = dims(&mut rng);
        let (groups, n) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let mut store = ParamStore::new();
        let block = RegionBlock::new(&mut store, &mut rng, "block", d, h);
        zero_params(&mut store, &block.output_params());
        let x = rand_tensor(&mut rng, &[groups * n, d]);
        let text = rand_tensor(&mut rng, &[groups, d]);
        let mut g = Graph::frozen(&store);
        let (xv, tv) = (g.input(x.clone()), g.input(text));
        let y = block.forward(&mut g, xv, tv, groups).map_err(|e| e.to_string())?;
        same("region block", seed, g.tape.value(y), &x)?;
    }
    Ok(())
}

fn extractor_identity() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = dims(&mut rng);
        let (batch, n, k) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let mut store = ParamStore::new();
        let repeats = rng.random_range(1..=3);
        let ext = RegionExtractor::new(&mut store, &mut rng, d, h, repeats);
        zero_params(&mut store, &ext.output_params());
        let image = rand_tensor(&mut rng, &[batch * n, d]);
        let text = rand_tensor(&mut rng, &[k, d]);
        let mut g = Graph::frozen(&store);
        let (iv, tv) = (g.input(image.clone()), g.input(text));
        let y = ext.extract(&mut g, iv, tv, batch).map_err(|e| e.to_string())?;
        let mut want = Vec::with_capacity(batch * k * d);
        for b in 0..batch {
            let mut mean = vec![0.0; d];
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(image.row(b * n + r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for _ in 0..k {
                want.extend_from_slice(&mean);
            }
        }
        let got = g.tape.value(y);
        let close = got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12);
        if got.shape() != [batch * k, d] || !close {
            return Err(format!("extractor seed {seed}: region features are not the token means"));
        }
    }
    Ok(())
}

fn transformer_identity() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = dims(&mut rng);
        let (groups, n) = (rng.random_range(1..=3), rng.random_range(1..=5));
        let mut store = ParamStore::new();
        let layer = TransformerLayer::new(&mut store, &mut rng, "layer", d, h);
        zero_params(&mut store, &layer.output_params());
        let x = rand_tensor(&mut rng, &[groups * n, d]);
        let mask = if rng.random_bool(0.5) {
            AttnMask::Full
        } else {
            AttnMask::PrefixCausal {
                prefix: rng.random_range(0..=n),
            }
        };
        let mut g = Graph::frozen(&store);
        let xv = g.input(x.clone());
        let y = layer.forward(&mut g, xv, groups, mask).map_err(|e| e.to_string())?;
        same("transformer layer", seed, g.tape.value(y), &x)?;
    }
    Ok(())
}

fn vtrans_identity() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = dims(&mut rng);
        let (batch, rows) = (rng.random_range(1..=3), rng.random_range(2..=5));
        let mut store = ParamStore::new();
        let layers = rng.random_range(1..=3);
        let vtrans = VisualTransfer::new(&mut store, &mut rng, d, h, layers);
        zero_params(&mut store, &vtrans.output_params());
        let x = rand_tensor(&mut rng, &[batch * rows, d]);
        let mut g = Graph::frozen(&store);
        let xv = g.input(x.clone());
        let y = vtrans.forward(&mut g, xv, batch).map_err(|e| e.to_string())?;
        same("visual transfer", seed, g.tape.value(y), &x)?;
    }
    Ok(())
}

fn text_encoder_identity() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = dims(&mut rng);
        let vocab = rng.random_range(2..=10);
        let mut store = ParamStore::new();
        let layers = rng.random_range(1..=2);
        let enc = TextEncoder::new(&mut store, &mut rng, vocab, d, layers, h, 8);
        let mut zeroed = enc.output_params();
        zeroed.push(enc.positions);
        zero_params(&mut store, &zeroed);
        let id = rng.random_range(0..vocab);
        let mut g = Graph::frozen(&store);
        let y = enc.encode(&mut g, &[id]).map_err(|e| e.to_string())?;
        let table = store.get(enc.token_embedding);
        let want = Tensor::new(&[1, d], table.row(id).to_vec()).unwrap();
        same("text encoder", seed, g.tape.value(y), &want)?;
    }
    Ok(())
}

struct DecoderCase {
    store: ParamStore,
    dec: Decoder,
    prompt: Tensor,
    prefix: Vec<usize>,
}

fn decoder_case(seed: u64) -> DecoderCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = dims(&mut rng);
    let vocab = rng.random_range(4..=12);
    let prompt_len = rng.random_range(1..=5);
    let mut store = ParamStore::new();
    let layers = rng.random_range(1..=3);
    let dec = Decoder::new(&mut store, &mut rng, vocab, d, h, layers, prompt_len, 10);
    let prompt = rand_tensor(&mut rng, &[prompt_len, d]);
    let prefix = (0..rng.random_range(2..=10)).map(|_| rng.random_range(0..vocab)).collect();
    DecoderCase {
        store,
        dec,
        prompt,
        prefix,
    }
}

fn full_logits(c: &DecoderCase, prefix: &[usize]) -> Result<Tensor, String> {
    let mut g = Graph::frozen(&c.store);
    let p = g.input(c.prompt.clone());
    let y = c.dec.logits(&mut g, p, prefix).map_err(|e| e.to_string())?;
    Ok(g.tape.value(y).clone())
}

fn causal_mask_exact() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let c = decoder_case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let cut = rng.random_range(1..c.prefix.len());
        let mut other = c.prefix.clone();
        for t in &mut other[cut..] {
            *t = (*t + 1 + rng.random_range(0..c.dec.vocab - 1)) % c.dec.vocab;
        }
        let a = full_logits(&c, &c.prefix)?;
        let b = full_logits(&c, &other)?;
        let v = c.dec.vocab;
        if a.data()[..cut * v] != b.data()[..cut * v] {
            return Err(format!("seed {seed}: changing tokens from {cut} on altered earlier logits"));
        }
        if a.data()[cut * v..] == b.data()[cut * v..] {
            return Err(format!("seed {seed}: later logits ignore their own tokens"));
        }
    }
    Ok(())
}

fn incremental_matches_full() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let c = decoder_case(seed);
        let full = full_logits(&c, &c.prefix)?;
        let inc = c
            .dec
            .runner(&c.store)
            .prefix_logits(&c.prompt, &c.prefix)
            .map_err(|e| e.to_string())?;
        let worst = full
            .data()
            .iter()
            .zip(inc.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if worst > 1e-10 {
            return Err(format!("seed {seed}: max abs difference {worst:e}"));
        }
    }
    Ok(())
}

fn adaptive_weight_rule() -> Result<(), String> {
    let at = |r: f64, theta: f64| adaptive_lambda(r, theta).map_err(|e| e.to_string());
    for theta in [40.0, 4.0, 0.8, 2.5] {
        let cases = [(theta, 1.0), (theta / 2.0, 0.5), (theta * 1.5, 1.0), (theta + 1e-9, 1.0)];
        for (reward, want) in cases {
            let got = at(reward, theta)?;
            if got != want {
                return Err(format!("reward {reward}, threshold {theta}: weight {got}, expected {want}"));
            }
        }
    }
    if adaptive_lambda(1.0, 0.0).is_ok() {
        return Err("zero threshold accepted".into());
    }
    Ok(())
}
