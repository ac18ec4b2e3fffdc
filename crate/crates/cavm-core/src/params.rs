//! Central registry of named trainable parameters.
//!
//! All networks fetch their weights from a `ParamStore` by hierarchical
//! name ("fdi.stage0.w", "ar.fine.layer2.attn.wq", ...). The optimizer
//! replaces entries with fresh leaves each step, and checkpointing,
//! freezing and byte-level comparisons all work on the same flat map.
//! Insertion order is fixed by construction order, which keeps every
//! run with the same seeds bit-reproducible.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zero,
    /// Every element set to the same value (e.g. norm gains at 1).
    Const(f64),
    /// Uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    Uniform { fan_in: usize },
}

/// Cloning is cheap: tensors are immutable and reference-counted, so a
/// clone shares values until `replace` swaps in new ones.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<Tensor<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))
    }

    /// Register a new parameter; errors on duplicate names.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut SplitMix64) -> Result<Tensor<T>> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter '{name}'")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zero => vec![T::ZERO; n],
            Init::Const(v) => vec![T::from_f64(v); n],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect()
            }
        };
        let t = Tensor::from_vec(shape, data)?.requires_grad();
        self.entries.insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Swap in an updated value (same shape) for an existing parameter.
    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param_replace",
                format!("'{name}': {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Overwrite-or-create from external data (checkpoint load).
    pub fn set_raw(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<()> {
        let t = Tensor::from_vec(shape, data)?.requires_grad();
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters whose names start with any of `prefixes`, in store order.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Byte-comparable snapshot of all values.
    pub fn snapshot(&self) -> Vec<(String, Vec<T>)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.data().to_vec()))
            .collect()
    }
}
