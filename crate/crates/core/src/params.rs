//! Named parameter storage.

use std::collections::BTreeMap;

use crate::error::{contract_err, dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Parameters keyed by dotted path. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract_err!("duplicate parameter name {name:?}"));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>> {
        self.params.get(name).ok_or_else(|| contract_err!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<S>> {
        self.params.get_mut(name).ok_or_else(|| contract_err!("unknown parameter {name:?}"))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.grad)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(dim_err!("parameter {name:?} has shape {:?}, got {:?}", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn grad_norm(&self) -> S {
        self.params.values().flat_map(|p| p.grad.data().iter()).map(|&g| g * g).sum::<S>().sqrt()
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: S) -> S {
        let norm = self.grad_norm();
        if norm > max_norm && norm > S::zero() {
            let scale = max_norm / norm;
            for p in self.params.values_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), grad: p.grad.cast() }))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_sorted() {
        let mut s = ParamStore::<f64>::new();
        s.insert("b.w", Tensor::zeros(&[2])).unwrap();
        s.insert("a.w", Tensor::zeros(&[3])).unwrap();
        assert!(s.insert("a.w", Tensor::zeros(&[3])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a.w", "b.w"]);
        assert_eq!(s.num_scalars(), 5);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Tensor::zeros(&[2])).unwrap();
        s.get_mut("x").unwrap().grad = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!(s.grad_norm() <= 1.0 + 1e-12);
    }
}
