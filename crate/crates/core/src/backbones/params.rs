use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Named tensors of a model: trainable weights plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(|n| !is_buffer(n))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// How batch normalization behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Use stored running statistics.
    Inference,
    /// Use per-batch statistics and report them for running-average updates.
    Train,
}

/// Running-statistics observation produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Binds a [`ParamStore`] to a tape for one forward pass.
///
/// Each parameter is registered at most once; with `trainable` set the
/// registered leaves receive gradients, which [`Binder::gradients`] maps back
/// to parameter names.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    trainable: bool,
    norm_mode: NormMode,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
    stats: RefCell<Vec<BatchStats>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore, trainable: bool, norm_mode: NormMode) -> Self {
        Self { tape, store, trainable, norm_mode, bound: RefCell::default(), stats: RefCell::default() }
    }

    /// Parameters as constants, batch norm in inference mode.
    pub fn frozen(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Self::new(tape, store, false, NormMode::Inference)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t, self.trainable && !is_buffer(name));
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn record_stats(&self, stats: BatchStats) {
        self.stats.borrow_mut().push(stats);
    }

    pub fn take_stats(&self) -> Vec<BatchStats> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    /// Gradients of every bound trainable parameter, zero-filled where no
    /// gradient flowed.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| !is_buffer(name))
            .map(|(name, v)| (name.clone(), grads.wrt(*v)))
            .collect()
    }
}
