//! Named trainable tensors and their binding onto a tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Tape, Value};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±√(6/(fan_in+fan_out))` for a `[fan_in×fan_out]` matrix.
    GlorotUniform,
    Zeros,
    Ones,
}

/// Declares one named tensor of the model.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn glorot(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![rows, cols],
            init: Init::GlorotUniform,
        }
    }

    pub fn zeros(name: impl Into<String>, cols: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![1, cols],
            init: Init::Zeros,
        }
    }

    pub fn ones(name: impl Into<String>, cols: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![1, cols],
            init: Init::Ones,
        }
    }
}

/// The complete named set of trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Initializes every spec in order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = Rng::stream(seed, "param-init", 0);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::GlorotUniform => {
                    let fan_in = spec.shape[0] as f64;
                    let fan_out = spec.shape[1] as f64;
                    let limit = (6.0 / (fan_in + fan_out)).sqrt();
                    (0..n).map(|_| rng.uniform_in(-limit, limit)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            tensors.insert(
                spec.name.clone(),
                Tensor::new(spec.shape.clone(), data).expect("spec shape"),
            );
        }
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks that the stored tensors match `specs` name-for-name.
    pub fn validate_against(&self, specs: &[ParamSpec]) -> Result<(), ParamError> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ParamError::ShapeMismatch {
                    name: spec.name.clone(),
                    got: t.shape().to_vec(),
                    expected: spec.shape.clone(),
                });
            }
        }
        if self.tensors.len() != specs.len() {
            let spec_names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.names().find(|n| !spec_names.contains(&n.as_str())) {
                return Err(ParamError::Unknown(extra.clone()));
            }
        }
        Ok(())
    }
}

/// Tape-bound view of a parameter set: every tensor registered as a
/// named variable so gradients can be collected by name.
pub struct ParamBinding {
    values: BTreeMap<String, Value>,
}

impl ParamBinding {
    /// Wraps an existing name → value map (e.g. variables bound by the
    /// gradient-check harness).
    pub fn from_values(values: BTreeMap<String, Value>) -> Self {
        Self { values }
    }

    pub fn bind(tape: &Tape, params: &ModelParams) -> Self {
        let mut values = BTreeMap::new();
        for (name, tensor) in params.iter() {
            values.insert(name.clone(), tape.var(name.clone(), tensor.clone()));
        }
        Self { values }
    }

    pub fn get(&self, name: &str) -> Result<Value, ParamError> {
        self.values
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_init_respects_limit_and_seed() {
        let specs = vec![ParamSpec::glorot("w", 4, 8)];
        let a = ModelParams::init(&specs, 7);
        let b = ModelParams::init(&specs, 7);
        let c = ModelParams::init(&specs, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f64 / 12.0).sqrt();
        for &v in a.get("w").unwrap().data() {
            assert!(v.abs() <= limit);
        }
    }

    #[test]
    fn validate_catches_shape_and_name_drift() {
        let specs = vec![ParamSpec::glorot("w", 2, 2), ParamSpec::zeros("b", 2)];
        let mut p = ModelParams::init(&specs, 0);
        assert!(p.validate_against(&specs).is_ok());
        p.set("w", Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            p.validate_against(&specs),
            Err(ParamError::ShapeMismatch { .. })
        ));
    }
}
