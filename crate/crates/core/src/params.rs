//! Flat, ordered parameter storage shared by every network type.
//!
//! Layers hold indices into a [`ParamStore`]; gradients and optimizer moments
//! are kept in stores with the same order and shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{Real, Tensor};

/// Standard deviation of the zero-mean normal used for convolution weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// True when names and shapes agree entry by entry.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Content hash over names, shapes and values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.iter() {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }
}

/// Gradients share the parameter store layout.
pub type GradStore<T> = ParamStore<T>;

/// Seeded source for weight initialization.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid normal"),
        }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.normal.sample(&mut self.rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("consistent shape")
    }
}
