use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A persistent tensor with an optional gradient buffer.
///
/// `grad` is only ever allocated for trainable tensors, and always has the
/// same shape as `value`.
#[derive(Clone, Debug)]
pub struct DiffTensor<F> {
    name: String,
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    trainable: bool,
}

impl<F: Real> DiffTensor<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<F> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Tensor<F>> {
        self.grad.as_ref()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    /// Silently ignored for frozen tensors.
    pub fn accumulate_grad(&mut self, g: &Tensor<F>) {
        if !self.trainable {
            return;
        }
        debug_assert_eq!(g.shape(), self.value.shape());
        match &mut self.grad {
            Some(buf) => buf.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Arena of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<DiffTensor<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(DiffTensor::new(name, value, trainable));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DiffTensor<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut DiffTensor<F>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.clear_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
