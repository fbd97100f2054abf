//! Random instances of every differentiable tape operation, shared by the
//! autodiff gradient tests and the acceptance run.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrg_autodiff::{check_gradients, AttnMask, Tape, Tensor, TensorError, Var};

pub const TRIALS: u64 = 100;
pub const RTOL: f64 = 1e-4;

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

/// Inputs of one random instance and the scalar function built on them.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub f: Loss,
}

impl Instance {
    fn new(
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'static,
    ) -> Self {
        Self {
            inputs,
            f: Box::new(f),
        }
    }
}

pub type Builder = fn(&mut ChaCha8Rng, u64) -> Instance;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

/// Reduces any output to a scalar through a fixed random projection.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = rand_tensor(&mut rng, tape.shape(y));
    tape.weighted_sum(y, &w)
}

/// Every operation family with its instance builder.
pub fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", matmul),
        ("add/mul/scale/gelu", elementwise),
        ("add_row", add_row),
        ("softmax", softmax),
        ("log_softmax", log_softmax),
        ("layer_norm", layer_norm),
        ("attention", attention),
        ("embed", embed),
        ("mean_rows/concat/slice/reshape", row_and_column_plumbing),
        ("sum", sum),
        ("cross_entropy", cross_entropy),
        ("bce_with_logits", bce),
        ("token_log_probs", token_log_prob),
        ("clipped_surrogate", clipped_surrogate),
        ("kl_to_reference", kl),
        ("ca-sa-ffn block", composite_attention_block),
    ]
}

/// Largest relative error over `TRIALS` seeded instances; `Err` names the
/// first failing seed.
pub fn run_trials(name: &str, build: Builder) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = build(&mut rng, seed);
        let report = check_gradients(|t, v| (inst.f)(t, v), &inst.inputs, RTOL)
            .map_err(|e| format!("{name} seed {seed}: {e}"))?;
        worst = worst.max(report.max_rel_error);
        if !report.passed() {
            return Err(format!(
                "{name} seed {seed}: max rel error {:e} at {:?}",
                report.max_rel_error, report.worst
            ));
        }
    }
    Ok(worst)
}

pub fn matmul(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let inputs = vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])];
    Instance::new(inputs, move |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, seed)
    })
}

pub fn elementwise(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let shape = [dim(rng), dim(rng)];
    let inputs = vec![rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
    let s: f64 = rng.random_range(-2.0..2.0);
    Instance::new(inputs, move |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.mul(a, v[1])?;
        let c = t.scale(b, s)?;
        let d = t.gelu(c)?;
        project(t, d, seed)
    })
}

pub fn add_row(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (r, c) = (dim(rng), dim(rng));
    let inputs = vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c])];
    Instance::new(inputs, move |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, seed)
    })
}

pub fn softmax(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let shape = [dim(rng), dim(rng)];
    let inputs = vec![rand_tensor(rng, &shape)];
    Instance::new(inputs, move |t, v| {
        let y = t.softmax(v[0])?;
        project(t, y, seed)
    })
}

pub fn log_softmax(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let shape = [dim(rng), dim(rng)];
    let inputs = vec![rand_tensor(rng, &shape)];
    Instance::new(inputs, move |t, v| {
        let y = t.log_softmax(v[0])?;
        project(t, y, seed)
    })
}

pub fn layer_norm(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let c = rng.random_range(2..=8);
    let rows = dim(rng);
    let inputs = vec![
        rand_tensor(rng, &[rows, c]),
        rand_tensor(rng, &[c]),
        rand_tensor(rng, &[c]),
    ];
    Instance::new(inputs, move |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, seed)
    })
}

pub fn attention(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let groups = rng.random_range(1..=3);
    let nq = dim(rng);
    let causal = rng.random_bool(0.5);
    let nk = if causal { nq } else { dim(rng) };
    let (dk, dv) = (dim(rng), dim(rng));
    let mask = if causal {
        AttnMask::PrefixCausal {
            prefix: rng.random_range(0..=nq),
        }
    } else {
        AttnMask::Full
    };
    let inputs = vec![
        rand_tensor(rng, &[groups * nq, dk]),
        rand_tensor(rng, &[groups * nk, dk]),
        rand_tensor(rng, &[groups * nk, dv]),
    ];
    Instance::new(inputs, move |t, v| {
        let y = t.attention(v[0], v[1], v[2], groups, mask)?;
        project(t, y, seed)
    })
}

pub fn embed(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (vocab, d) = (dim(rng), dim(rng));
    let ids: Vec<usize> = (0..dim(rng)).map(|_| rng.random_range(0..vocab)).collect();
    let inputs = vec![rand_tensor(rng, &[vocab, d])];
    Instance::new(inputs, move |t, v| {
        let y = t.embed(v[0], &ids)?;
        project(t, y, seed)
    })
}

pub fn row_and_column_plumbing(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (g, n, c) = (rng.random_range(1..=3), rng.random_range(1..=3), dim(rng));
    let c2 = dim(rng);
    let inputs = vec![
        rand_tensor(rng, &[g * n, c]),
        rand_tensor(rng, &[g * n, c]),
        rand_tensor(rng, &[g * n, c2]),
    ];
    let start = rng.random_range(0..2 * g * n);
    let len = rng.random_range(1..=2 * g * n - start);
    let cstart = rng.random_range(0..c + c2);
    let clen = rng.random_range(1..=c + c2 - cstart);
    Instance::new(inputs, move |t, v| {
        let rows = t.concat_rows(&[v[0], v[1]])?;
        let sliced = t.slice_rows(rows, start, len)?;
        let pooled = t.mean_rows(v[0], n)?;
        let wide = t.concat_cols(&[v[1], v[2]])?;
        let narrow = t.slice_cols(wide, cstart, clen)?;
        let flat = t.reshape(narrow, &[g * n * clen])?;
        let a = project(t, sliced, seed)?;
        let b = project(t, pooled, seed + 1)?;
        let c = project(t, flat, seed + 2)?;
        let ab = t.add(a, b)?;
        t.add(ab, c)
    })
}

pub fn sum(rng: &mut ChaCha8Rng, _seed: u64) -> Instance {
    let shape = [dim(rng), dim(rng)];
    let inputs = vec![rand_tensor(rng, &shape)];
    Instance::new(inputs, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    })
}

pub fn cross_entropy(rng: &mut ChaCha8Rng, _seed: u64) -> Instance {
    let (b, classes) = (dim(rng), dim(rng));
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let inputs = vec![rand_tensor(rng, &[b, classes])];
    Instance::new(inputs, move |t, v| t.cross_entropy(v[0], &targets))
}

pub fn bce(rng: &mut ChaCha8Rng, _seed: u64) -> Instance {
    let n = dim(rng);
    let targets: Vec<f64> = (0..n)
        .map(|_| f64::from(rng.random_bool(0.5) as u8))
        .collect();
    let mut x = rand_tensor(rng, &[n]);
    x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    Instance::new(vec![x], move |t, v| t.bce_with_logits(v[0], &targets))
}

pub fn token_log_prob(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (rows, classes) = (dim(rng), dim(rng));
    let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let temp = rng.random_range(0.5..2.0);
    let inputs = vec![rand_tensor(rng, &[rows, classes])];
    Instance::new(inputs, move |t, v| {
        let y = t.token_log_probs(v[0], &targets, temp)?;
        project(t, y, seed)
    })
}

pub fn clipped_surrogate(rng: &mut ChaCha8Rng, _seed: u64) -> Instance {
    let n = dim(rng);
    let eps = 0.2;
    let adv: f64 = rng.random_range(-2.0..2.0);
    let mut new = Vec::with_capacity(n);
    let mut old = Vec::with_capacity(n);
    while new.len() < n {
        let o: f64 = rng.random_range(-3.0..-0.1);
        let d: f64 = rng.random_range(-0.4..0.4);
        let ratio = d.exp();
        // Keep instances away from the non-differentiable clip corners.
        if (ratio - (1.0 - eps)).abs() < 1e-3 || (ratio - (1.0 + eps)).abs() < 1e-3 {
            continue;
        }
        old.push(o);
        new.push(o + d);
    }
    let inputs = vec![Tensor::new(&[n, 1], new).unwrap()];
    Instance::new(inputs, move |t, v| {
        t.clipped_surrogate(v[0], &old, adv, eps)
    })
}

pub fn kl(rng: &mut ChaCha8Rng, _seed: u64) -> Instance {
    let (rows, classes) = (dim(rng), dim(rng));
    let mut reference = rand_tensor(rng, &[rows, classes]);
    for row in reference.data_mut().chunks_exact_mut(classes) {
        let lse = rrg_autodiff::kernels::log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    let temp = rng.random_range(0.5..2.0);
    let inputs = vec![rand_tensor(rng, &[rows, classes])];
    Instance::new(inputs, move |t, v| {
        t.kl_to_reference(v[0], &reference, temp)
    })
}

/// Pre-LN cross-attention, self-attention and feed-forward sublayers with
/// residual connections, written directly against the tape.
pub fn composite_attention_block(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let n = rng.random_range(1..=4);
    let d = rng.random_range(2..=6);
    let mut inputs = vec![rand_tensor(rng, &[n, d]), rand_tensor(rng, &[1, d])];
    for _ in 0..6 {
        inputs.push(rand_tensor(rng, &[d, d]));
    }
    inputs.push(rand_tensor(rng, &[d, 2 * d]));
    inputs.push(rand_tensor(rng, &[2 * d, d]));
    inputs.push(Tensor::full(&[d], 1.0));
    inputs.push(Tensor::zeros(&[d]));
    Instance::new(inputs, move |t, v| {
        let (x, text) = (v[0], v[1]);
        let (wq, wk, wv, wo, sq, so) = (v[2], v[3], v[4], v[5], v[6], v[7]);
        let (w1, w2, gain, bias) = (v[8], v[9], v[10], v[11]);
        let h = t.layer_norm(x, gain, bias, 1e-5)?;
        let q = t.matmul(h, wq)?;
        let k = t.matmul(text, wk)?;
        let val = t.matmul(text, wv)?;
        let a = t.attention(q, k, val, 1, AttnMask::Full)?;
        let a = t.matmul(a, wo)?;
        let x = t.add(x, a)?;
        let h = t.layer_norm(x, gain, bias, 1e-5)?;
        let s = t.attention(h, h, h, 1, AttnMask::Full)?;
        let s = t.matmul(s, sq)?;
        let x = t.add(x, s)?;
        let h = t.layer_norm(x, gain, bias, 1e-5)?;
        let f = t.matmul(h, w1)?;
        let f = t.gelu(f)?;
        let f = t.matmul(f, w2)?;
        let f = t.matmul(f, so)?;
        let y = t.add(x, f)?;
        project(t, y, seed)
    })
}
