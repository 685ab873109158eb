use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

/// Named, ordered parameter collection. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            requires_grad: true,
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

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(move |id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Copy of the store at another precision. Gradients are reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out
                .insert(p.name.clone(), p.value.cast())
                .expect("names already unique");
            out.get_mut(id).requires_grad = p.requires_grad;
        }
        out
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn values_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
