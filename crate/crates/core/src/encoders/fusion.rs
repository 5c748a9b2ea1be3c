//! Per-view feature fusion: frozen image features plus learned angle and
//! depth embeddings, then a row-wise layer norm.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, FrozenEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{normal, Bindings, Params};
use crate::smo::{ViewImage, MAX_VIEW_DEPTH, NUM_CANDIDATE_VIEWS};
use crate::Scalar;

pub const NUM_DEPTH_BUCKETS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewFusionConfig {
    pub dim: usize,
    /// Lower bound on the per-row standard deviation inside the layer norm.
    pub sigma_floor: f64,
    /// Multiplier on the sinusoidal initialization of the angle table.
    pub degree_init_scale: f64,
    /// Standard deviation of the Gaussian initialization of the depth table.
    pub depth_init_std: f64,
    /// Upper end of the depth range split into buckets.
    pub max_depth: f64,
}

impl Default for ViewFusionConfig {
    fn default() -> Self {
        Self { dim: 32, sigma_floor: 1e-5, degree_init_scale: 0.1, depth_init_std: 0.02, max_depth: MAX_VIEW_DEPTH }
    }
}

/// Fused per-view features of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatureSet<T> {
    /// `V x D`, one row per view.
    pub features: Array2<T>,
    pub angle_indices: Vec<usize>,
    pub mean_depths: Vec<f64>,
}

impl<T: Scalar> ViewFeatureSet<T> {
    pub fn num_views(&self) -> usize {
        self.features.nrows()
    }
}

/// Transformer-style sinusoidal table: even columns `sin`, odd columns `cos`.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |(p, c)| {
        let freq = 1.0 / 10000f64.powf((c / 2 * 2) as f64 / dim as f64);
        let x = p as f64 * freq;
        if c % 2 == 0 {
            x.sin()
        } else {
            x.cos()
        }
    })
}

/// Equal-width bucket of `mean_depth` over `[0, max_depth]`, clamped to the ends.
pub fn depth_bucket(mean_depth: f64, max_depth: f64) -> usize {
    if mean_depth.is_nan() || mean_depth <= 0.0 || max_depth.is_nan() || max_depth <= 0.0 {
        return 0;
    }
    ((mean_depth / max_depth * NUM_DEPTH_BUCKETS as f64) as usize).min(NUM_DEPTH_BUCKETS - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewFusion<T> {
    pub config: ViewFusionConfig,
    pub params: Params<T>,
}

impl<T: Scalar> ViewFusion<T> {
    pub fn new(config: ViewFusionConfig, seed: u64) -> Self {
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let degree = sinusoidal_table(NUM_CANDIDATE_VIEWS, d).mapv(|v| T::of(v * config.degree_init_scale));
        params.insert("fuse.degree", degree);
        params.insert("fuse.depth", normal(&mut rng, NUM_DEPTH_BUCKETS, d, config.depth_init_std));
        params.insert("fuse.gamma", Array2::ones((1, d)));
        params.insert("fuse.beta", Array2::zeros((1, d)));
        Self { config, params }
    }

    fn check(&self, v: usize, angles: &[usize], depths: &[f64]) -> Result<()> {
        if v == 0 {
            return Err(Error::InvalidArgument("need at least one view".into()));
        }
        if angles.len() != v {
            return Err(Error::DimensionMismatch { expected: v, got: angles.len() });
        }
        if depths.len() != v {
            return Err(Error::DimensionMismatch { expected: v, got: depths.len() });
        }
        if let Some(a) = angles.iter().find(|&&a| a >= NUM_CANDIDATE_VIEWS) {
            return Err(Error::InvalidArgument(format!("angle index {a} outside [0, {NUM_CANDIDATE_VIEWS})")));
        }
        Ok(())
    }

    fn buckets(&self, depths: &[f64]) -> Vec<usize> {
        depths.iter().map(|&d| depth_bucket(d, self.config.max_depth)).collect()
    }

    /// Standardized rows before the learned scale and shift.
    pub fn forward_standardized(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        raw: Var,
        angles: &[usize],
        depths: &[f64],
    ) -> Result<Var> {
        let (v, d) = g.shape(raw);
        self.check(v, angles, depths)?;
        if d != self.config.dim {
            return Err(Error::DimensionMismatch { expected: self.config.dim, got: d });
        }
        let deg = g.gather(b.var("fuse.degree"), angles);
        let dep = g.gather(b.var("fuse.depth"), &self.buckets(depths));
        let summed = g.add(g.add(raw, deg), dep);
        Ok(g.layer_norm(summed, T::of(self.config.sigma_floor)))
    }

    /// `V x D` fused rows.
    pub fn forward(&self, g: &Graph<T>, b: &Bindings, raw: Var, angles: &[usize], depths: &[f64]) -> Result<Var> {
        let normed = self.forward_standardized(g, b, raw, angles, depths)?;
        Ok(g.add_row(g.mul_row(normed, b.var("fuse.gamma")), b.var("fuse.beta")))
    }

    pub fn cast<U: Scalar>(&self) -> ViewFusion<U> {
        ViewFusion { config: self.config.clone(), params: self.params.cast() }
    }
}

/// Fuse raw frozen features of `V` views into a [`ViewFeatureSet`].
pub fn fuse_view_features<T: Scalar>(
    raw: &Array2<T>,
    angle_indices: &[usize],
    mean_depths: &[f64],
    fusion: &ViewFusion<T>,
) -> Result<ViewFeatureSet<T>> {
    let g = Graph::new();
    let b = fusion.params.bind(&g);
    let x = g.leaf(raw.clone());
    let out = fusion.forward(&g, &b, x, angle_indices, mean_depths)?;
    let features = g.value(out).clone();
    Ok(ViewFeatureSet { features, angle_indices: angle_indices.to_vec(), mean_depths: mean_depths.to_vec() })
}

/// Stack the frozen image embeddings of `views` into a `V x D` matrix.
pub fn raw_view_features<T: Scalar>(frozen: &FrozenEncoder, views: &[ViewImage<T>]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((views.len(), frozen.dim()));
    for (mut row, view) in out.rows_mut().into_iter().zip(views) {
        row.assign(&frozen.encode_image::<T>(view)?.vec);
    }
    Ok(out)
}

/// Frozen image encoder followed by a trained fusion.
#[derive(Debug, Clone)]
pub struct FusedImageEncoder<T> {
    pub frozen: FrozenEncoder,
    pub fusion: ViewFusion<T>,
}

impl<T: Scalar> FusedImageEncoder<T> {
    pub fn new(frozen: FrozenEncoder, fusion: ViewFusion<T>) -> Self {
        Self { frozen, fusion }
    }

    pub fn encode_views(&self, views: &[ViewImage<T>]) -> Result<ViewFeatureSet<T>> {
        let raw = raw_view_features(&self.frozen, views)?;
        let angles: Vec<usize> = views.iter().map(|v| v.angle_index).collect();
        let depths: Vec<f64> = views.iter().map(|v| v.mean_depth()).collect();
        fuse_view_features(&raw, &angles, &depths, &self.fusion)
    }

    /// Unit-norm fused embedding of a single view.
    pub fn encode_view(&self, view: &ViewImage<T>) -> Result<Embedding<T>> {
        let set = self.encode_views(std::slice::from_ref(view))?;
        Ok(Embedding::new(set.features.row(0).to_owned()).normalized())
    }
}
