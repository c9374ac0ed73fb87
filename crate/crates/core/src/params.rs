//! Named parameter table and its binding onto an autodiff graph.

use std::collections::{BTreeMap, HashMap};

use dmlf_tensor::{Graph, Rng, Tensor, Var};

use crate::error::{DmlfError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
    /// Whether AdamW applies decoupled weight decay to this tensor.
    pub decay: bool,
}

/// All model parameters keyed by dotted name, in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool, decay: bool) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                frozen,
                decay,
            },
        );
    }

    /// A weight matrix drawn from `N(0, 1/fan_in)`; decayed.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &Rng, frozen: bool) {
        let mut r = rng.fork(name);
        let std = 1.0 / (fan_in as f32).sqrt();
        self.insert(name, Tensor::randn(&[fan_in, fan_out], std, &mut r), frozen, true);
    }

    /// A constant-filled vector (biases, norm gains, gates); not decayed.
    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f32, frozen: bool) {
        self.insert(name, Tensor::full(shape, value), frozen, false);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| DmlfError::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| DmlfError::Config(format!("missing parameter '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (n, p) in self.entries.iter_mut() {
            if n.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Copies values (not flags) of all parameters under `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, src) in other.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self.get_mut(name)?;
            if dst.value.shape() != src.value.shape() {
                return Err(DmlfError::Config(format!(
                    "shape mismatch for '{name}': {:?} vs {:?}",
                    dst.value.shape(),
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Names whose values differ bitwise between two stores with the same keys.
    pub fn changed_names(&self, other: &ParamStore) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(n, p)| {
                other
                    .entries
                    .get(*n)
                    .is_none_or(|q| !p.value.bit_identical(&q.value))
            })
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// One forward pass: a graph plus lazily bound parameter leaves.
///
/// Each parameter becomes a single leaf the first time it is requested.
/// Leaves require gradients only for trainable parameters and only when the
/// context was created for training.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    track_grads: bool,
    trace: Option<Vec<ScoreRecord>>,
}

/// Which attention produced a recorded score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    EncoderSelf,
    CausalSelf,
    GatedCross,
}

/// Shape of one attention score tensor captured during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ScoreRecord {
    pub kind: ScoreKind,
    pub rows: usize,
    pub cols: usize,
    pub heads: usize,
}

impl ScoreRecord {
    pub fn elements_per_head(&self) -> usize {
        self.rows * self.cols
    }
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, track_grads: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
            track_grads,
            trace: None,
        }
    }

    /// Wraps an existing graph, e.g. one prepared by a gradient checker.
    pub fn from_graph(g: Graph, store: &'a ParamStore, track_grads: bool) -> Self {
        Self {
            g,
            ..Self::new(store, track_grads)
        }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// Uses `v` for parameter `name` instead of a fresh leaf from the store.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    /// Records attention score shapes during the forward pass.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn track_grads(&self) -> bool {
        self.track_grads
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let param = self.store.get(name)?;
        let v = self
            .g
            .leaf(param.value.clone(), self.track_grads && !param.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn record_scores(&mut self, rec: ScoreRecord) {
        if let Some(t) = &mut self.trace {
            t.push(rec);
        }
    }

    pub fn take_trace(&mut self) -> Vec<ScoreRecord> {
        self.trace.take().unwrap_or_default()
    }

    pub fn trace(&self) -> &[ScoreRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.bound {
            if let Some(g) = self.g.grad(*v) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
