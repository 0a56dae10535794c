use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use crate::engine::{Element, Gradients, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies one parameter inside one store; recorded on tape leaves so
/// gradients can be routed back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

/// Ordered collection of named trainable tensors.
///
/// Iteration order is insertion order, so two stores built by the same
/// sequence of `insert` calls iterate identically.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element = f32> {
    id: u64,
    rng_seed: u64,
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore { id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed), rng_seed, params: IndexMap::new() }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub(crate) fn key(&self, name: &str) -> Result<ParamKey> {
        self.params
            .get_index_of(name)
            .map(|index| ParamKey { store: self.id, index })
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Adds every gradient that belongs to this store into the parameters'
    /// grad buffers. Calling it twice with the same gradients doubles them.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (key, g) in grads.param_grads() {
            if key.store == self.id {
                let (_, t) = self.params.get_index_mut(key.index).expect("param key from this store");
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Order-sensitive checksum over names and values.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in &self.params {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&t.checksum().to_le_bytes());
        }
        crate::io::fnv1a64(&bytes)
    }
}
