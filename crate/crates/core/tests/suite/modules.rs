//! Finite-difference checks of the composed model blocks. Every parameter
//! tensor and every block input is probed at randomly chosen elements.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrg_autodiff::{relative_error, Tensor, Var};
use rrg_core::extractor::RegionBlock;
use rrg_core::generator::{Decoder, DiseaseHead, VisualTransfer};
use rrg_core::model::ModelError;
use rrg_core::params::{Graph, ParamStore};

pub const TRIALS: u64 = 100;
pub const RTOL: f64 = 1e-4;
/// Elements probed per parameter tensor.
const PROBES: usize = 3;

type Loss = Box<dyn Fn(&mut Graph) -> Result<Var, ModelError>>;

pub struct Instance {
    pub store: ParamStore,
    pub loss: Loss,
}

pub type Builder = fn(&mut ChaCha8Rng, u64) -> Instance;

pub fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("region block", region_block),
        ("visual transfer", visual_transfer),
        ("decoder", decoder),
        ("disease head", disease_head),
    ]
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Moves every parameter off its structured initial value (unit gains,
/// zero biases) so all terms of the backward pass are exercised.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

/// Model width and head count. Widths below 3 are excluded: layer norm over
/// two features is a smoothed sign function whose curvature defeats
/// finite differences.
fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let heads = rng.random_range(1..=2);
    (heads * rng.random_range(3usize.div_ceil(heads)..=8 / heads), heads)
}

fn projection(seed: u64, shape: &[usize]) -> Tensor {
    rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995), shape)
}

pub fn region_block(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (d, h) = dims(rng);
    let groups = rng.random_range(1..=3);
    let n = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    let block = RegionBlock::new(&mut store, rng, "block", d, h);
    jitter(&mut store, rng);
    let x = store.add("input.image", rand_tensor(rng, &[groups * n, d]));
    let text = store.add("input.text", rand_tensor(rng, &[groups, d]));
    let w = projection(seed, &[groups * n, d]);
    Instance {
        store,
        loss: Box::new(move |g| {
            let (x, text) = (g.param(x), g.param(text));
            let y = block.forward(g, x, text, groups)?;
            Ok(g.tape.weighted_sum(y, &w)?)
        }),
    }
}

pub fn visual_transfer(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let (d, h) = dims(rng);
    let layers = rng.random_range(1..=2);
    let batch = rng.random_range(1..=2);
    let rows = 1 + rng.random_range(1..=3);
    let mut store = ParamStore::new();
    let vtrans = VisualTransfer::new(&mut store, rng, d, h, layers);
    jitter(&mut store, rng);
    let joint = store.add("input.joint", rand_tensor(rng, &[batch * rows, d]));
    let w = projection(seed, &[batch * rows, d]);
    Instance {
        store,
        loss: Box::new(move |g| {
            let joint = g.param(joint);
            let y = vtrans.forward(g, joint, batch)?;
            Ok(g.tape.weighted_sum(y, &w)?)
        }),
    }
}

pub fn decoder(rng: &mut ChaCha8Rng, _seed: u64) -> Instance {
    let (d, h) = dims(rng);
    let vocab = rng.random_range(4..=10);
    let layers = rng.random_range(1..=2);
    let prompt_len = rng.random_range(1..=4);
    let max_len = 6;
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, rng, vocab, d, h, layers, prompt_len, max_len);
    jitter(&mut store, rng);
    let prompt = store.add("input.prompt", rand_tensor(rng, &[prompt_len, d]));
    let t = rng.random_range(1..=max_len);
    let prefix: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
    Instance {
        store,
        loss: Box::new(move |g| {
            let prompt = g.param(prompt);
            let logits = dec.logits(g, prompt, &prefix)?;
            Ok(g.tape.cross_entropy(logits, &targets)?)
        }),
    }
}

pub fn disease_head(rng: &mut ChaCha8Rng, _seed: u64) -> Instance {
    let d = rng.random_range(1..=6);
    let rows = 1 + rng.random_range(1..=3);
    let classes = rng.random_range(1..=5);
    let batch = rng.random_range(1..=3);
    let mut store = ParamStore::new();
    let head = DiseaseHead::new(&mut store, rng, rows, d, classes);
    jitter(&mut store, rng);
    let joint = store.add("input.joint", rand_tensor(rng, &[batch * rows, d]));
    let targets: Vec<f64> = (0..batch * classes).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    Instance {
        store,
        loss: Box::new(move |g| {
            let joint = g.param(joint);
            let logits = head.forward(g, joint, batch)?;
            Ok(g.tape.bce_with_logits(logits, &targets)?)
        }),
    }
}

fn value(store: &ParamStore, loss: &Loss) -> Result<f64, ModelError> {
    let mut g = Graph::frozen(store);
    let out = loss(&mut g)?;
    Ok(g.tape.value(out).item())
}

/// Largest relative error between analytic and central-difference
/// gradients over the probed elements of one instance.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<(f64, String), ModelError> {
    let mut g = Graph::trainable(&inst.store);
    let out = (inst.loss)(&mut g)?;
    g.backward(out)?;
    let analytic = g.gradients();
    drop(g);

    let mut probe = inst.store.clone();
    let mut worst = (0.0, String::new());
    for id in inst.store.ids() {
        let n = inst.store.get(id).numel();
        let elems: Vec<usize> = if n <= PROBES {
            (0..n).collect()
        } else {
            (0..PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        let grad = analytic[id.index()].as_ref().expect("all parameters trainable");
        for j in elems {
            let x = inst.store.get(id).data()[j];
            let h = 1e-5 * (1.0 + x.abs());
            probe.get_mut(id).data_mut()[j] = x + h;
            let plus = value(&probe, &inst.loss)?;
            probe.get_mut(id).data_mut()[j] = x - h;
            let minus = value(&probe, &inst.loss)?;
            probe.get_mut(id).data_mut()[j] = x;
            let e = relative_error(grad.data()[j], (plus - minus) / (2.0 * h));
            if e > worst.0 {
                worst = (e, format!("{}[{j}]", inst.store.name(id)));
            }
        }
    }
    Ok(worst)
}

/// Largest relative error over `TRIALS` seeded instances; `Err` names the
/// first failing seed and element.
pub fn run_trials(name: &str, build: Builder) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = build(&mut rng, seed);
        let (e, at) = check_instance(&inst, &mut rng).map_err(|e| format!("{name} seed {seed}: {e}"))?;
        if e > RTOL {
            return Err(format!("{name} seed {seed}: max rel error {e:e} at {at}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}
