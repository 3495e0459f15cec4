use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor, Var};

/// Named parameter tensors, ordered by name so every traversal is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Copies every entry of `other` into `self`, overwriting on collision.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// The subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every parameter on `tape`; `tracked(name)` decides which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut GradTape, tracked: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k, v.clone(), tracked(k))))
            .collect();
        Bindings { vars }
    }

    /// Order-independent content digest of names, shapes and exact bits.
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::new();
        for (k, v) in &self.map {
            bytes.extend_from_slice(k.as_bytes());
            bytes.extend_from_slice(&v.to_vlat_bytes());
        }
        crate::numerics::fnv1a(&bytes)
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            map: iter.into_iter().collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("parameter {name} is not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn extend(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }
}
