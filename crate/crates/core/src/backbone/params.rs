use std::collections::BTreeMap;

use autograd::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }
}

impl<F: Real> ParamStore<F> {
    /// Draws every tensor from its own `(seed, name)` stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let mut rng = stream(seed, &format!("init/{}", spec.name));
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
                Init::XavierUniform => {
                    let fan_out = *spec.shape.last().unwrap_or(&1);
                    let fan_in = n / fan_out.max(1);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..=a)).collect()
                }
            };
            tensors.insert(spec.name.clone(), Tensor::from_f64(&spec.shape, &data));
        }
        ParamStore { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<F>>) -> Self {
        ParamStore { tensors }
    }

    /// Checks that every spec is present with the right shape.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<(), ModelError> {
        for s in specs {
            let t = self.tensors.get(&s.name).ok_or_else(|| ModelError::MissingParam(s.name.clone()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(ModelError::ParamShape { name: s.name.clone(), found: t.shape().to_vec(), expected: s.shape.clone() });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }
}
