//! Named storage for trainable parameters.
//!
//! Parameters live in a sorted map so every iteration — binding onto a tape,
//! gradient harvesting, optimiser updates, checkpoint serialisation — walks
//! them in the same order on every run.

use std::collections::BTreeMap;

use super::{NodeId, Tape, Tensor, TensorError};

/// One trainable tensor: its value, the gradient from the latest backward
/// pass, and whether weight decay applies (true for weight matrices, false
/// for biases and normalisation parameters).
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub decay: bool,
}

/// A collection of named parameters with dotted hierarchical paths such as
/// `block1.layer2.forward.W_f`. Iteration order is always sorted by path.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

/// Tape handles for every parameter of a store, produced by
/// [`ParamStore::bind`]. Valid only for the tape that created them.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn get(&self, path: &str) -> Result<NodeId, TensorError> {
        self.ids
            .get(path)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. The gradient buffer starts at zero with the
    /// same shape as the value, and keeps that shape for the store's life.
    pub fn insert(&mut self, path: &str, value: Tensor, decay: bool) -> Result<(), TensorError> {
        if self.entries.contains_key(path) {
            return Err(TensorError::DuplicateParam(path.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            path.to_string(),
            Param { value, grad, decay },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, path: &str) -> Result<&Param, TensorError> {
        self.entries
            .get(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param, TensorError> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    /// Sorted iteration over `(path, param)`.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Registers every parameter value as a leaf on `tape`, in sorted path
    /// order, and returns the handle map.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (path, p) in &self.entries {
            ids.insert(path.clone(), tape.leaf(p.value.clone()));
        }
        BoundParams { ids }
    }

    /// Copies leaf gradients from `tape` back into the store, replacing the
    /// previous gradients. A parameter the loss never touched gets zeros.
    pub fn harvest(&mut self, tape: &Tape, bound: &BoundParams) -> Result<(), TensorError> {
        for (path, p) in self.entries.iter_mut() {
            let id = bound
                .ids
                .get(path)
                .copied()
                .ok_or_else(|| TensorError::UnknownParam(path.clone()))?;
            match tape.grad(id) {
                Some(g) => p.grad = g.clone(),
                None => p.grad = Tensor::zeros(p.value.shape()),
            }
        }
        Ok(())
    }

    /// Global L2 norm over all gradients, accumulated in sorted path order.
    pub fn global_grad_norm(&self) -> f64 {
        let mut sum = 0.0;
        for p in self.entries.values() {
            for g in p.grad.data() {
                sum += g * g;
            }
        }
        sum.sqrt()
    }

    /// Multiplies every gradient element by `scale`.
    pub fn scale_grads(&mut self, scale: f64) {
        for p in self.entries.values_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }

    /// Copies all parameter values (not gradients) out of the store.
    pub fn values_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Restores values from a snapshot. Paths and shapes must match the
    /// store exactly.
    pub fn restore_values(&mut self, snapshot: &BTreeMap<String, Tensor>) -> Result<(), TensorError> {
        if snapshot.len() != self.entries.len() {
            return Err(TensorError::Invalid {
                op: "restore_values",
                msg: format!(
                    "snapshot has {} parameters, store has {}",
                    snapshot.len(),
                    self.entries.len()
                ),
            });
        }
        for (path, p) in self.entries.iter_mut() {
            let v = snapshot
                .get(path)
                .ok_or_else(|| TensorError::UnknownParam(path.clone()))?;
            if v.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "restore_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
