//! Named trainable parameter storage shared by extractors and classifiers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, NodeId, Tensor};

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat, allocation-ordered parameter storage. Allocation order is part of
/// a model's identity: serialization and optimizer state index by it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Allocate a weight initialized uniformly in
    /// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn alloc_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.alloc(name, Tensor::new(shape.to_vec(), data).expect("shape/data agree"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(self.values[id.0].shape(), value.shape());
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }
}

/// Per-graph association between parameters and their leaf nodes. Binding
/// the same parameter twice reuses the first leaf so batched graphs share
/// parameter nodes and gradients accumulate correctly.
#[derive(Debug, Default)]
pub struct Bindings {
    bound: Vec<(ParamId, NodeId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.bound.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let node = g.param(store.get(id).clone());
        self.bound.push((id, node));
        node
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.bound.iter().copied()
    }

    /// Associate a parameter with an existing leaf. Gradient checks use
    /// this to route probe leaves through model code.
    pub fn preset(&mut self, id: ParamId, node: NodeId) {
        debug_assert!(self.bound.iter().all(|(p, _)| *p != id));
        self.bound.push((id, node));
    }
}
