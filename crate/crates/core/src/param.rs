//! Named, seeded model parameters.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default initialization scale for every weight matrix and embedding table.
pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered collection of parameters with unique names.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    seed: u64,
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

/// FNV-1a over the name, folded with the global seed. Stable across
/// platforms and releases, unlike `DefaultHasher`.
pub fn param_seed(global_seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ global_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(CoreError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gaussian(0, std) initialization seeded from (store seed, name).
    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let value = gaussian_tensor(param_seed(self.seed, name), shape, std)?;
        self.insert(name, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, T::of(value))?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::UnknownParameter(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return shape_err("set_value", p.value.shape(), value.shape());
        }
        p.value = value;
        Ok(())
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`.
    /// Returns how many were touched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Re-draws every parameter under `prefix` with a fresh seed.
    pub fn reinit_prefix(&mut self, prefix: &str, seed: u64, std: f64) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value = gaussian_tensor(param_seed(seed, &p.name), p.value.shape(), std)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

pub fn gaussian_tensor<T: Scalar>(seed: u64, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, std).map_err(|e| CoreError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::of(normal.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data)
}
