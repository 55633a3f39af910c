use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Result, StamError};
use crate::rng;
use crate::tensor::Tensor;

/// Named trainable tensors, in registration order.
///
/// Each parameter draws its initial values from its own named stream derived
/// from the store seed, so a value depends only on (seed, name, shape).
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: IndexMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(StamError::DuplicateParameter(name));
        }
        self.params.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    /// Registers a parameter drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn register_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        if fan_in == 0 {
            return Err(StamError::domain(
                "register_uniform",
                "fan_in must be positive",
            ));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let mut rng = rng::stream(self.seed, &format!("param/{name}"));
        let values = (0..numel)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::new(shape, values)?)
    }

    pub fn register_constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| StamError::UnknownParameter(name.to_string()))?;
        if t.numel() != values.len() {
            return Err(StamError::shape("set_values", t.shape(), &[values.len()]));
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets every gradient to an all-zero buffer.
    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}
