use indexmap::IndexMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of model tensors.
///
/// Trainable tensors have `requires_grad` set and a gradient buffer; frozen
/// tensors (external query vectors, batch-norm running statistics) do not.
/// Insertion order is the serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.entries.insert_full(name.to_string(), tensor);
        Ok(ParamId(idx))
    }

    pub fn add_trainable(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        let n = tensor.len();
        let mut t = tensor;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; n]);
        self.insert(name, t)
    }

    pub fn add_frozen(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        let mut t = tensor;
        t.requires_grad = false;
        t.grad = None;
        self.insert(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, _, t)| t.requires_grad)
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&[Scalar]> {
        self.get(id).grad.as_deref()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[Scalar]) {
        let t = self.get_mut(id);
        if let Some(g) = t.grad.as_mut() {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += *b;
            }
        }
    }

    pub fn total_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::len)
            .sum()
    }
}
