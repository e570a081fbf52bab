//! Named parameter storage shared by the network, optimizer and checkpoints.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors with matching gradient slots.
///
/// Registration order is the canonical order everywhere: optimizer state,
/// checkpoint payloads and parameter listings all follow it, which is what
/// makes runs bit-reproducible.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id.0);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    /// Adds `delta` into the gradient slot of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        let slot = &mut self.grads[id.0];
        debug_assert_eq!(slot.shape(), delta.shape());
        for (g, d) in slot.data_mut().iter_mut().zip(delta.data()) {
            *g = *g + *d;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    /// Iterates `(id, name, value)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Iterates `(id, value, grad)` mutably over values, in registration order.
    pub fn iter_value_grad_mut(&mut self) -> impl Iterator<Item = (&mut Tensor<T>, &Tensor<T>)> {
        self.values.iter_mut().zip(self.grads.iter())
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}
