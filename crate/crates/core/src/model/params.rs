use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

/// Ordered, named parameter tensors with per-parameter weight-decay flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    decay: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: String, tensor: Tensor<S>, decay: bool) -> Result<usize> {
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        self.decay.push(decay);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn decay_flags(&self) -> &[bool] {
        &self.decay
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.decay)
            .map(|((n, t), &d)| (n.as_str(), t, d))
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        let mut out = ParamStore::new();
        for (n, t, d) in self.iter() {
            if keep(n) {
                out.push(n.into(), t.clone(), d).expect("names unique");
            }
        }
        out
    }
}
