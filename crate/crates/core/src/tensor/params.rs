use indexmap::IndexMap;
use rand::Rng;

use super::{RunningUpdate, Scalar, Tensor};
use crate::{Error, Result};

/// A named tensor owned by a model. Non-trainable entries hold batchnorm
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of every tensor a model owns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.entries.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// Writes batchnorm running statistics recorded during a forward pass.
    pub fn apply_running_updates(&mut self, updates: Vec<RunningUpdate<T>>) -> Result<()> {
        for u in updates {
            self.tensor_mut(&u.mean_key)?.data_mut().copy_from_slice(&u.mean);
            self.tensor_mut(&u.var_key)?.data_mut().copy_from_slice(&u.var);
        }
        Ok(())
    }

    /// Same entries in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { tensor: p.tensor.cast(), trainable: p.trainable }))
                .collect(),
        }
    }

    /// Kaiming-uniform weight: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn insert_kaiming<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
        self.insert(name, Tensor { shape: shape.to_vec(), data }, true);
    }
}
