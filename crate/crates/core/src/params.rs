use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// A learnable tensor plus its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(alloc::format!("duplicate parameter {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    /// Inserts a Glorot-uniform initialised tensor, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<()> {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-a, a)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(alloc::format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::contract(alloc::format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .entries
            .values()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum();
        libm::sqrt(sq)
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for p in self.entries.values_mut() {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            }
        }
        norm
    }

    pub(crate) fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(alloc::format!("unknown parameter {name}")))?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::dim(alloc::format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                grad.shape(),
                p.value.shape()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }
}
