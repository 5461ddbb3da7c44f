//! Named parameter storage shared by the model and the optimizer.
//!
//! Parameters live outside any tape in a `BTreeMap`, so every iteration over
//! them (binding, optimizer updates, serialization) happens in the same
//! lexicographic name order — one of the pillars of bitwise-reproducible runs.

use std::collections::BTreeMap;

use super::{NodeId, Tape};
use crate::error::Result;

/// One named tensor with its shape and trainability flag.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    /// Frozen parameters (`false`) are bound without gradient tracking and
    /// must never receive optimizer updates.
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// All model parameters, keyed by hierarchical names such as
/// `layer1.smoe.expert3.w_in`.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) {
        self.insert_with(name, data, shape, true);
    }

    pub fn insert_with(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        shape: Vec<usize>,
        trainable: bool,
    ) {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "parameter data does not match its shape");
        let prev = self.entries.insert(name.into(), Param { data, shape, trainable });
        assert!(prev.is_none(), "duplicate parameter name");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Mark every parameter whose name satisfies `pred` as frozen.
    pub fn freeze_matching(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            if pred(name) {
                p.trainable = false;
            }
        }
    }

    /// Iterate in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Param::numel).sum()
    }

    /// Create one leaf per parameter on `tape`, in name order. Frozen
    /// parameters become constants, so they can never accumulate gradients.
    pub fn bind(&self, tape: &mut Tape) -> Result<ParamBindings> {
        let mut map = BTreeMap::new();
        for (name, p) in &self.entries {
            let id = tape.leaf(p.data.clone(), p.shape.clone(), p.trainable)?;
            map.insert(name.clone(), id);
        }
        Ok(ParamBindings { map })
    }
}

/// Name → tape-leaf mapping for one forward/backward pass.
#[derive(Debug)]
pub struct ParamBindings {
    map: BTreeMap<String, NodeId>,
}

impl ParamBindings {
    /// Leaf for a parameter that is known to exist.
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    /// Gradients for every trainable parameter that received one, in name
    /// order. Parameters untouched by the loss report a zero vector.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.map {
            if !tape.requires_grad(id) {
                continue;
            }
            let grad = match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.data(id).len()],
            };
            out.insert(name.clone(), grad);
        }
        out
    }
}
