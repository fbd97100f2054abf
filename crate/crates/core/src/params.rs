//! Named parameter storage and binding of parameters onto a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rrg_autodiff::{Tape, Tensor, TensorError, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// Registration order is stable for a given model configuration, which is
/// what checkpoints rely on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Registers a `rows×cols` tensor with entries drawn from `N(0, std²)`.
    pub fn add_normal<R: Rng>(&mut self, rng: &mut R, name: impl Into<String>, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(&[rows, cols], data).expect("finite normal draws"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        if value.shape() != self.values[id.0].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Rounds every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// A tape together with a lazy mapping from parameters to tape leaves.
///
/// Trainable parameters become gradient-tracked leaves the first time they
/// are used; all other parameters enter the tape as constants.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: Vec<bool>,
    vars: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    /// Every parameter is trainable.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self::with_mask(store, vec![true; store.len()])
    }

    /// No parameter is tracked; for inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with_mask(store, vec![false; store.len()])
    }

    /// Parameters whose name satisfies `pred` are trainable.
    pub fn select(store: &'a ParamStore, pred: impl Fn(&str) -> bool) -> Self {
        let mask = store.names.iter().map(|n| pred(n)).collect();
        Self::with_mask(store, mask)
    }

    pub fn with_mask(store: &'a ParamStore, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self {
            tape: Tape::new(),
            store,
            trainable,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The tape node holding parameter `id`.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.values[id.0].clone();
        let v = if self.trainable[id.0] {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.tape.backward(loss)
    }

    /// Gradients of trainable parameters after `backward`, indexed like the
    /// store. Parameters that were never used get zero gradients; frozen
    /// parameters get `None`.
    pub fn gradients(&self) -> Vec<Option<Tensor>> {
        (0..self.store.len())
            .map(|i| {
                if !self.trainable[i] {
                    return None;
                }
                Some(match self.vars[i] {
                    Some(v) => self.tape.grad(v),
                    None => Tensor::zeros(self.store.values[i].shape()),
                })
            })
            .collect()
    }

    /// Gradient reaching a non-trainable parameter, if any. Frozen
    /// parameters are constants on the tape, so this is always zero; it is
    /// exposed so callers can assert it.
    pub fn frozen_gradient_norm(&self) -> f64 {
        (0..self.store.len())
            .filter(|&i| !self.trainable[i])
            .filter_map(|i| self.vars[i])
            .filter_map(|v| self.tape.grad_data(v))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
