//! Modality encoders and the view-feature fusion.

pub mod frozen;
pub mod fusion;
pub mod point;

use ndarray::Array1;

use crate::Scalar;

pub use frozen::{read_embedding_table, write_embedding_table, FrozenEncoder, FrozenKind, ImageEmbedder};
pub use fusion::{
    depth_bucket, fuse_view_features, raw_view_features, sinusoidal_table, FusedImageEncoder, ViewFeatureSet, ViewFusion,
    ViewFusionConfig, NUM_DEPTH_BUCKETS,
};
pub use point::{PointEncoder, PointEncoderConfig, PointEncoding};

/// A `D`-dimensional feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub vec: Array1<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(vec: Array1<T>) -> Self {
        Self { vec }
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn norm(&self) -> T {
        self.vec.dot(&self.vec).sqrt()
    }

    /// Unit-norm copy; the zero vector stays zero.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n > T::zero() {
            Self { vec: &self.vec / n }
        } else {
            self.clone()
        }
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - T::one()).abs().as_f64() <= 1e-6
    }

    pub fn is_finite(&self) -> bool {
        self.vec.iter().all(|v| v.is_finite())
    }

    pub fn cosine(&self, other: &Self) -> T {
        let denom = self.norm() * other.norm();
        if denom > T::zero() {
            self.vec.dot(&other.vec) / denom
        } else {
            T::zero()
        }
    }
}
