use std::collections::HashMap;

use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// A named learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let grad = Tensor::zeros(tensor.shape());
        Self {
            name: name.into(),
            tensor,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Ordered collection of parameters. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, tensor));
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.params[i] = Parameter::new(name, tensor),
            None => {
                self.index.insert(name.to_string(), self.params.len());
                self.params.push(Parameter::new(name, tensor));
            }
        }
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn insert_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::matrix(fan_in, fan_out, rng.normal_vec(fan_in * fan_out, scale))?;
        self.insert(format!("{prefix}.w"), w)?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]))
    }

    pub fn insert_zero_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]))
    }

    pub fn insert_layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.insert(format!("{prefix}.gain"), Tensor::filled(&[1, dim], 1.0))?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, dim]))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn by_index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Copies every parameter of `other` into `self`, overwriting same-named
    /// entries and appending new ones.
    pub fn merge_from(&mut self, other: &ParamStore) {
        for p in other.iter() {
            self.set(&p.name, p.tensor.clone());
        }
    }

    /// Parameters whose name starts with `prefix`, as a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.iter().filter(|p| p.name.starts_with(prefix)) {
            out.set(&p.name, p.tensor.clone());
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_shape_tracks_tensor() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::filled(&[2, 3], 1.5)).unwrap();
        let p = s.get("w").unwrap();
        assert_eq!(p.grad.shape(), p.tensor.shape());
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_grads_resets() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        s.get_mut("w").unwrap().grad.data_mut()[1] = 3.0;
        s.zero_grads();
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
