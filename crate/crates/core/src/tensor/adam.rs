//! Bias-corrected Adam.

use std::collections::HashMap;

use super::{ParamStore, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers and step counter. The learning rate can be changed
/// between steps (per-epoch decay) without touching the moments.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    m: HashMap<String, Vec<T>>,
    v: HashMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step_count: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// One update of every trainable parameter in `params`. Every trainable
    /// parameter must have a gradient of matching length.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(String, Vec<T>)]) -> Result<()> {
        let by_name: HashMap<&str, &Vec<T>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        let names: Vec<String> = params.trainable_names().cloned().collect();
        for name in &names {
            let g = by_name.get(name.as_str()).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let len = params.tensor(name)?.len();
            if g.len() != len {
                return Err(Error::shape(
                    "adam",
                    format!("gradient for `{name}` has {} values, parameter has {len}", g.len()),
                ));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);

        for name in names {
            let g = by_name[name.as_str()];
            let p = params.tensor_mut(&name)?.data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![T::zero(); p.len()]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
