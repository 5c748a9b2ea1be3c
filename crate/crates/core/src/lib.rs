//! Tri-modal alignment of point clouds with rendered views and category text.
//!
//! The crate is organised the way data flows through a run:
//!
//! * [`smo`] builds shapes, renders candidate views, samples view windows and
//!   keeps the two-level category tree.
//! * [`encoders`] holds the trainable point encoder, the frozen image/text
//!   encoders and the angle/depth view fusion.
//! * [`align`] computes the text-weighted joint view feature, the contrastive
//!   and classification objectives, and the training step.
//! * [`zeroshot`] evaluates by nearest prompt embedding and retrieves clouds
//!   from images.
//! * [`llm`] injects projected point tokens into a small causal language model.
//! * [`harness`] wires the stages together behind a run configuration.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f32`; gradient checks run in `f64`. Aliases for both are exported below.

pub mod align;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod llm;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod smo;
pub mod zeroshot;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision instantiations used for training and evaluation.
pub type PointCloudF32 = smo::PointCloud<f32>;
pub type EmbeddingF32 = encoders::Embedding<f32>;
pub type AlignModelF32 = align::AlignModel<f32>;
pub type TrainStateF32 = align::TrainState<f32>;
pub type BridgeModelF32 = llm::BridgeModel<f32>;
pub type GraphF32 = graph::Graph<f32>;

/// Double-precision instantiations used for gradient checks.
pub type PointCloudF64 = smo::PointCloud<f64>;
pub type EmbeddingF64 = encoders::Embedding<f64>;
pub type AlignModelF64 = align::AlignModel<f64>;
pub type TrainStateF64 = align::TrainState<f64>;
pub type BridgeModelF64 = llm::BridgeModel<f64>;
pub type GraphF64 = graph::Graph<f64>;

/// SplitMix64 fold of `parts` into `base`, for independent per-item streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
