//! Named parameter storage.
//!
//! Model modules register their tensors once at construction and hold
//! [`ParamId`] handles. Each training step binds the whole store onto a fresh
//! tape in registration order, which keeps gradient accumulation correct when
//! a parameter is used more than once in a pass (the UNet decoder runs twice
//! under inside feedback).

use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name);
        self.values.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Replace a parameter's data, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) {
        assert_eq!(data.len(), self.values[id.0].numel());
        self.values[id.0].data = data;
    }

    /// Insert every parameter onto `tape` as a leaf, in registration order.
    /// `trainable` controls whether the leaves request gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        self.bind_filtered(tape, |_| trainable)
    }

    /// Like [`ParamStore::bind`] with per-parameter trainability.
    pub fn bind_filtered(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let ids = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, t)| {
                let mut t = t.clone();
                t.requires_grad = trainable(name);
                t.grad = None;
                tape.leaf(t)
            })
            .collect();
        Binding { ids }
    }
}

/// Per-tape mapping from parameters to their leaf ids.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    /// Leaf ids in registration order, parallel to the store.
    pub fn all(&self) -> &[TensorId] {
        &self.ids
    }
}
