use std::collections::HashMap;

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad: None, requires_grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Freezes every parameter, then unfreezes exactly `ids`.
    pub fn set_trainable(&mut self, ids: &[ParamId]) {
        for p in &mut self.params {
            p.requires_grad = false;
            p.grad = None;
        }
        for id in ids {
            self.params[id.0].requires_grad = true;
        }
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect()
    }

    /// Resets the gradient accumulator of every trainable parameter to zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = p.requires_grad.then(|| Tensor::zeros(p.value.shape()));
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (a, g) in acc.data_mut().iter_mut().zip(grad) {
            *a += g;
        }
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Copies the values of `ids` for later restoration.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<(ParamId, Tensor)> {
        ids.iter().map(|&id| (id, self.value(id).clone())).collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Tensor)]) {
        for (id, t) in snapshot {
            self.params[id.0].value = t.clone();
        }
    }
}
