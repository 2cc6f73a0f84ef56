//! Named parameter registry.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable: conv/linear weights, biases, batch-norm affine terms.
    Weight,
    /// Non-learnable state: batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        tensor.requires_grad = kind == ParamKind::Weight;
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, kind, tensor });
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

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn replace(&mut self, id: ParamId, tensor: Tensor) {
        let p = &mut self.params[id.0];
        let requires = p.tensor.requires_grad;
        p.tensor = tensor;
        p.tensor.requires_grad = requires;
        p.tensor.grad = None;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds gradients keyed by parameter index.
    pub fn accumulate<'a>(&mut self, grads: impl Iterator<Item = (usize, &'a [f32])>) -> Result<()> {
        for (key, g) in grads {
            let p = self
                .params
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {key}")))?;
            p.tensor.accumulate_grad(g);
        }
        Ok(())
    }
}

/// True when `name` is `prefix` or lies under it (`prefix.`...).
pub fn under_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_matches_on_component_boundary() {
        assert!(under_prefix("conv1.conv.weight", "conv1"));
        assert!(under_prefix("fc.bias", "fc"));
        assert!(!under_prefix("conv10.weight", "conv1"));
        assert!(under_prefix("conv5_x.block1", "conv5_x.block1"));
        assert!(!under_prefix("fc", "fc.bias"));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Weight, Tensor::scalar(1.0));
        s.add("a", ParamKind::Weight, Tensor::scalar(1.0));
    }
}
