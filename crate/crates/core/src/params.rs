//! Named parameter tensors with gradient buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
    /// Set when the last accumulated backward pass reached this tensor.
    pub touched: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        let n = value.numel();
        self.params.push(Param {
            name,
            value,
            grad: vec![0.0; n],
            touched: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.touched = false;
        }
    }

    /// Adds the graph gradients of every bound parameter into its buffer.
    pub fn accumulate(&mut self, graph: &Graph, bindings: &Bindings) {
        for (i, slot) in bindings.slots.iter().enumerate() {
            let Some(node) = slot else { continue };
            if let Some(g) = graph.grad(*node) {
                let p = &mut self.params[i];
                for (dst, src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
                p.touched = true;
            }
        }
    }

    /// Copies values from `other` for every name present in both with equal
    /// shapes.
    pub fn copy_matching(&mut self, other: &ParamStore) {
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                }
            }
        }
    }
}

/// Lazy map from parameters to graph leaves for one forward pass. Only the
/// parameters a pass actually uses end up on the tape.
#[derive(Debug)]
pub struct Bindings {
    slots: Vec<Option<NodeId>>,
    trainable: bool,
}

impl Bindings {
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Self {
            slots: vec![None; store.len()],
            trainable,
        }
    }

    pub fn bind(&mut self, graph: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.slots[id.0] {
            return n;
        }
        let t = store.get(id).value.clone();
        let n = if self.trainable { graph.param(t) } else { graph.constant(t) };
        self.slots[id.0] = Some(n);
        n
    }

    pub fn node(&self, id: ParamId) -> Option<NodeId> {
        self.slots[id.0]
    }
}
