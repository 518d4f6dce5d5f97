use std::collections::BTreeMap;

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub(crate) struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Named parameters plus the optimizer's per-parameter moment estimates.
/// Iteration order is by name, so every pass over the store is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    values: BTreeMap<String, Tensor>,
    pub(crate) moments: BTreeMap<String, Moments>,
    pub(crate) step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics if the name is already taken.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        let prev = self.values.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    /// Overwrites an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .values
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParameterStore::set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Copies every value present in `other` into `self` (shapes must match).
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, value) in other.iter() {
            self.set(name, value.clone())?;
        }
        Ok(())
    }
}
