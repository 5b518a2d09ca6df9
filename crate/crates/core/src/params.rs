//! Named trainable tensors and their initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<F>) -> Result<()> {
        let current = &self.tensors[id.0];
        if current.shape() != tensor.shape() {
            return Err(Error::param(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                current.shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Deterministic initializer. Every parameter draws from its own stream
/// derived from the model seed and the parameter name, so adding or
/// removing parameters never shifts the values of the others.
#[derive(Clone, Debug)]
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform_fan_in<F: Real>(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<F> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64_lossy(rng.random_range(-bound..=bound)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// 64-bit FNV-1a hash; stable across platforms and builds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
