//! Named parameter store shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use crate::diff::{Graph, NodeId, Result, Scalar, Tensor};

/// Index of a parameter inside a [`ParamSet`]. Stable for the lifetime of
/// the set; also the optimizer's moment index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named f32 tensors. Iteration order is insertion
/// order, which fixes the optimizer update order and the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<f32>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push((name.to_string(), tensor));
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<f32>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Insert every parameter into `graph` as a gradient-tracked leaf,
    /// casting to the graph's scalar type.
    pub fn bind<S: Scalar>(&self, graph: &mut Graph<S>) -> Result<BoundParams> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for (_, t) in &self.entries {
            let cast: Tensor<S> = t.cast();
            ids.push(graph.leaf(&cast, true)?);
        }
        Ok(BoundParams { ids })
    }
}

/// Graph leaf ids for one binding of a [`ParamSet`].
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}
