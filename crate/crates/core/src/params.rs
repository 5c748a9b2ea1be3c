//! Named parameter tensors and their binding onto a [`Graph`].

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::graph::{Gradients, Graph, Var};
use crate::Scalar;

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    tensors: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.tensors.get_mut(name)
    }

    /// Panicking accessor for names the owning model created itself.
    pub fn tensor(&self, name: &str) -> &Array2<T> {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<T>)> {
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect(),
        }
    }

    /// Move every tensor of `other` into `self`.
    pub fn extend(&mut self, other: Params<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Keep only the tensors whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian bit patterns.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            hasher.update((t.nrows() as u64).to_le_bytes());
            hasher.update((t.ncols() as u64).to_le_bytes());
            for &v in t.iter() {
                hasher.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Record every tensor as a leaf of `graph`.
    pub fn bind(&self, graph: &Graph<T>) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`Params`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn merge(mut self, other: Bindings) -> Self {
        self.vars.extend(other.vars);
        self
    }

    /// Gradient of every bound parameter, zeros where the root did not depend on it.
    pub fn grads<T: Scalar>(&self, grads: &Gradients<T>, params: &Params<T>) -> Params<T> {
        let mut out = Params::new();
        for (name, value) in params.iter() {
            if let Some(&v) = self.vars.get(name) {
                out.insert(name.clone(), grads.get_or_zeros(v, value.dim()));
            }
        }
        out
    }
}

/// `x W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear<T: Scalar>(g: &Graph<T>, b: &Bindings, x: Var, prefix: &str) -> Var {
    let y = g.matmul(x, b.var(&format!("{prefix}.w")));
    g.add_row(y, b.var(&format!("{prefix}.b")))
}

/// He-uniform weights and zero bias for a ReLU-fed linear layer.
pub fn init_linear<T: Scalar, R: Rng>(
    params: &mut Params<T>,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = (6.0 / fan_in as f64).sqrt();
    params.insert(format!("{prefix}.w"), uniform(rng, fan_in, fan_out, bound));
    params.insert(format!("{prefix}.b"), Array2::zeros((1, fan_out)));
}

pub fn uniform<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(rng)))
}

pub fn normal<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(rng)))
}
