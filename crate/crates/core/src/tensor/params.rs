use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// A named learnable tensor, e.g. `encoder.0.attn.head1.wq`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Every learnable parameter of the tracker, in insertion order.
///
/// Names are unique. Iteration order is stable, which keeps optimizers and
/// checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransformerWeights {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl TransformerWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.id(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.params[id].value)
    }

    pub fn by_id(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }
}
