//! Named parameter storage and the Adam optimizer.

use super::{shape_err, NeuralError, Result, Tensor};
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("learning rate must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// Batch-norm running statistics are stored alongside weights but never
/// receive gradient updates.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Parameter {
        let n = value.len();
        Parameter {
            value,
            trainable,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Adam step count for this parameter.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter; running statistics are non-trainable.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let trainable = !is_running_stat(&name);
        self.params.insert(name, Parameter::new(value, trainable));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NeuralError::UnknownParameter(name.to_string()))
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    /// Overwrites the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NeuralError::UnknownParameter(name.to_string()))?;
        if p.value.dims() != value.dims() {
            return Err(shape_err(
                name,
                format!("{:?} vs stored {:?}", value.dims(), p.value.dims()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Hash over names and exact bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, p) in &self.params {
            name.hash(&mut h);
            p.value.dims().hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// One bias-corrected Adam update of every trainable parameter that has
    /// a gradient in `grads`. Each updated parameter's step count grows by one.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| NeuralError::UnknownParameter(name.clone()))?;
            if p.value.dims() != g.dims() {
                return Err(shape_err(
                    name,
                    format!("gradient {:?} vs parameter {:?}", g.dims(), p.value.dims()),
                ));
            }
        }
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            if !p.trainable {
                continue;
            }
            p.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(p.t as i32);
            let c2 = 1.0 - cfg.beta2.powi(p.t as i32);
            for (((w, m), v), &gi) in p.value.data_mut().iter_mut().zip(&mut p.m).zip(&mut p.v).zip(g.data()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
