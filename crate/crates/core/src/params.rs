//! Named parameter storage shared by every trainable component.
//!
//! Names are dotted paths with a component prefix: `enc.`, `qp.`, `lm.`,
//! `lora.`. Frozen prefixes are recorded on the store and honoured by the
//! optimizer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub const ENCODER_PREFIX: &str = "enc.";
pub const QPMAPPER_PREFIX: &str = "qp.";
pub const LM_PREFIX: &str = "lm.";
pub const LORA_PREFIX: &str = "lora.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Panicking lookup for names the model itself created.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
        self.tensors.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Copy of the tensors under `prefix` (no frozen marks).
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self.with_prefix(prefix).map(|(k, v)| (k.clone(), v.clone())).collect(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
        self.frozen.extend(other.frozen);
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, t)| t.len()).sum()
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen.insert(prefix.to_string());
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.remove(prefix);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn checksums(&self, prefix: &str) -> BTreeMap<String, String> {
        self.with_prefix(prefix)
            .map(|(k, t)| (k.clone(), t.checksum()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Places every tensor on the graph. Tensors for which `trainable`
    /// returns true become gradient-requiring leaves.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let map = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable(k))))
            .collect();
        Bound { map }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    map: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    pub fn var(&self, name: &str) -> Var {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}
