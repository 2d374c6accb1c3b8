use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{Gradients, Rng, Stream, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of one named tensor in a [`ParamStore`].
///
/// Two layers holding the same `ParamId` share storage: that is how
/// cross-layer weight sharing is expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer and counted in parameter reports.
    Weight,
    /// Mutable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors. Insertion order is stable and is the
/// order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight).map(|e| e.value.numel()).sum()
    }

    /// Replaces the value of `id`, checking the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Applies buffer updates recorded during a forward pass, in order.
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, value) in updates {
            self.entries[id.0].value = value;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward-pass context: binds store entries onto a tape, owns the
/// dropout and gate-noise streams, and collects buffer updates.
///
/// Each parameter is bound to exactly one tape leaf, however many layers use
/// it, so gradients of shared weights accumulate across every use.
pub struct Ctx<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    mode: Mode,
    frozen: bool,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    dropout_rng: RefCell<Rng>,
    noise_rng: RefCell<Rng>,
    updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Ctx<'t> {
    /// `rng` is the per-step root; dropout and gate noise fork from it.
    pub fn new(tape: &'t Tape, store: &'t ParamStore, mode: Mode, rng: &Rng) -> Self {
        Ctx {
            tape,
            store,
            mode,
            frozen: false,
            bound: RefCell::new(vec![None; store.len()]),
            dropout_rng: RefCell::new(rng.fork(Stream::Dropout, 0)),
            noise_rng: RefCell::new(rng.fork(Stream::GateNoise, 0)),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn eval(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::new(tape, store, Mode::Eval, &Rng::new(0))
    }

    /// Eval-mode context whose parameters are bound as constants (a frozen
    /// teacher): no gradient flows into them.
    pub fn frozen(tape: &'t Tape, store: &'t ParamStore) -> Self {
        let mut ctx = Self::eval(tape, store);
        ctx.frozen = true;
        ctx
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// The tape leaf for a store entry, created on first use.
    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let value = entry.value.clone();
        let v = if self.frozen || entry.kind == ParamKind::Buffer {
            self.tape.constant(value)
        } else {
            self.tape.param(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Buffer value, reflecting updates already recorded in this pass.
    pub fn buffer(&self, id: ParamId) -> Tensor {
        self.updates
            .borrow()
            .iter()
            .rev()
            .find(|(u, _)| *u == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| self.store.get(id).clone())
    }

    pub fn record_update(&self, id: ParamId, value: Tensor) {
        self.updates.borrow_mut().push((id, value));
    }

    pub fn take_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    pub fn with_dropout_rng<R>(&self, f: impl FnOnce(&mut Rng) -> R) -> R {
        f(&mut self.dropout_rng.borrow_mut())
    }

    pub fn with_noise_rng<R>(&self, f: impl FnOnce(&mut Rng) -> R) -> R {
        f(&mut self.noise_rng.borrow_mut())
    }

    /// Gradients of every parameter bound in this pass.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let bound = self.bound.borrow();
        ParamGrads {
            grads: bound
                .iter()
                .map(|v| v.and_then(|v| grads.get_id(v.id()).cloned()))
                .collect(),
        }
    }
}

/// Gradient per store entry; `None` when the entry did not influence the loss.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}
