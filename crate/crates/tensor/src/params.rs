use std::collections::BTreeMap;

use crate::autograd::grad;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named learnable tensors, ordered by name.
///
/// Names follow `layer{l}/{unit}/{param}`. Every stored tensor is a
/// gradient-tracking leaf.
#[derive(Clone, Default)]
pub struct ParamSet<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor<T>) {
        self.map.insert(name.into(), value.requires_grad_leaf());
    }

    /// Stores `value` as-is, keeping whatever graph it belongs to, so that
    /// gradients of a forward pass flow back to the tensors it was built
    /// from.
    pub fn bind(&mut self, name: impl Into<String>, value: &Tensor<T>) {
        self.map.insert(name.into(), value.clone());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Merges `other` into this set, replacing tensors with equal names.
    pub fn extend(&mut self, other: &ParamSet<T>) {
        for (k, v) in other.iter() {
            self.map.insert(k.to_string(), v.clone());
        }
    }

    /// Gradient of a scalar loss for every parameter, in name order.
    pub fn grads(&self, loss: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
        let tensors: Vec<&Tensor<T>> = self.map.values().collect();
        let gs = grad(loss, &tensors, false)?;
        Ok(self.map.keys().cloned().zip(gs).collect())
    }

    /// Replaces the value of an existing parameter with a fresh leaf.
    pub(crate) fn set_values(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let old = self.get(name)?;
        let shape = old.shape().to_vec();
        let t = Tensor::from_vec(data, &shape)?.requires_grad_leaf();
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    /// True when both sets hold the same names with bit-identical values.
    pub fn bit_equal(&self, other: &ParamSet<T>) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }
}
