//! Named trainable tensors with gradient accumulators.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::Matrix;
use crate::error::{invalid, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub frozen: bool,
}

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Parameters of one model component. Every store, including each clone,
/// carries a distinct key so backends can hold parameters of several stores
/// at once.
#[derive(Debug)]
pub struct ParamStore {
    key: u64,
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].grad
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar entries over the given parameters.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.params[id.0].value.len()).sum()
    }

    /// Concatenated gradient entries of `ids`, in order.
    pub fn flat_grad(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|id| self.params[id.0].grad.as_slice().iter().copied())
            .collect()
    }

    /// Concatenated values of `ids`, in order.
    pub fn flat_values(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|id| self.params[id.0].value.as_slice().iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_clears_every_accumulator() {
        let mut s = ParamStore::new();
        let a = s.add("a", Matrix::filled(2, 3, 1.0)).unwrap();
        let b = s.add("b", Matrix::scalar(2.0)).unwrap();
        s.grad_mut(a).fill(4.0);
        s.grad_mut(b).fill(-1.0);
        s.zero_grad();
        assert!(s.grad(a).as_slice().iter().all(|&g| g == 0.0));
        assert_eq!(s.grad(b).as_slice(), &[0.0]);
        assert_eq!(s.grad(a).shape(), s.value(a).shape());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::scalar(0.0)).unwrap();
        assert!(s.add("w", Matrix::scalar(0.0)).is_err());
    }

    #[test]
    fn set_value_keeps_shape() {
        let mut s = ParamStore::new();
        let a = s.add("a", Matrix::zeros(1, 2)).unwrap();
        assert!(s.set_value(a, Matrix::zeros(2, 1)).is_err());
        s.set_value(a, Matrix::row(vec![1.0, 2.0])).unwrap();
        assert_eq!(s.value(a).as_slice(), &[1.0, 2.0]);
    }
}
