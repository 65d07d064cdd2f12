//! Named parameter storage, the unit that checkpoints persist.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

/// Learnable arrays keyed by name, plus named statistics (normalization
/// constants, scales) that travel with them but are never trained.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    stats: BTreeMap<String, Vec<f64>>,
    pub seed: u64,
    pub stage: String,
    pub version: u32,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            version: PARAMS_FORMAT_VERSION,
            ..Default::default()
        }
    }

    /// Adds a parameter. Re-inserting an existing name must keep its shape.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if let Some(old) = self.params.get(name) {
            if old.shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: {:?} vs {:?}",
                    old.shape(),
                    value.shape()
                )));
            }
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn set_stat(&mut self, name: &str, value: Vec<f64>) {
        self.stats.insert(name.to_string(), value);
    }

    pub fn stat(&self, name: &str) -> Option<&[f64]> {
        self.stats.get(name).map(Vec::as_slice)
    }

    pub fn require_stat(&self, name: &str) -> Result<&[f64]> {
        self.stat(name)
            .ok_or_else(|| Error::MissingStatistics(name.to_string()))
    }

    pub fn stats(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.stats
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    /// Copies every parameter and statistic of `other` into `self`.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.stats {
            self.stats.insert(k.clone(), v.clone());
        }
    }

    /// Records every parameter on `tape`: names selected by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Binding {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            let v = if trainable(name) {
                tape.leaf(value.clone())
            } else {
                tape.constant(value.clone())
            };
            vars.insert(name.clone(), v);
        }
        Binding { vars }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Gradients of the trainable parameters, keyed by name. Parameters that
    /// the loss does not reach get explicit zeros.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v, tape.value(*v).len())))
            .collect()
    }
}
