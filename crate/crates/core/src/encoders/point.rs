//! Permutation-invariant point encoder: shared per-point perceptron,
//! max pooling over points, then a small head.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Embedding;
use crate::graph::{Graph, Var};
use crate::params::{init_linear, linear, Bindings, Params};
use crate::smo::PointCloud;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointEncoderConfig {
    /// Widths of the shared per-point layers; the last one is the pooled width.
    pub point_widths: Vec<usize>,
    pub head_hidden: usize,
    /// Output embedding dimension.
    pub dim: usize,
}

impl Default for PointEncoderConfig {
    fn default() -> Self {
        Self { point_widths: vec![64, 128], head_hidden: 128, dim: 32 }
    }
}

impl PointEncoderConfig {
    pub fn pooled_width(&self) -> usize {
        *self.point_widths.last().unwrap_or(&3)
    }
}

/// Graph nodes produced by one encoder pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct PointEncoding {
    /// `(B * N) x pooled_width` per-point features before pooling.
    pub per_point: Var,
    /// `B x pooled_width` max-pooled features.
    pub pooled: Var,
    /// `B x dim` output embeddings.
    pub embedding: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointEncoder<T> {
    pub config: PointEncoderConfig,
    pub params: Params<T>,
}

impl<T: Scalar> PointEncoder<T> {
    pub fn new(config: PointEncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut fan_in = 3;
        for (i, &w) in config.point_widths.iter().enumerate() {
            init_linear(&mut params, &mut rng, &format!("enc.point.{i}"), fan_in, w);
            fan_in = w;
        }
        init_linear(&mut params, &mut rng, "enc.head.0", fan_in, config.head_hidden);
        init_linear(&mut params, &mut rng, "enc.head.1", config.head_hidden, config.dim);
        Self { config, params }
    }

    /// Every weight and bias zero.
    pub fn zeros(config: PointEncoderConfig) -> Self {
        let mut enc = Self::new(config, 0);
        enc.params = enc.params.zeros_like();
        enc
    }

    /// Encode `points` holding `B` clouds of `n_points` rows each.
    pub fn forward(&self, g: &Graph<T>, b: &Bindings, points: Var, n_points: usize) -> PointEncoding {
        let mut x = points;
        for i in 0..self.config.point_widths.len() {
            x = g.relu(linear(g, b, x, &format!("enc.point.{i}")));
        }
        let per_point = x;
        let pooled = g.max_pool_segments(per_point, n_points);
        let hidden = g.relu(linear(g, b, pooled, "enc.head.0"));
        let embedding = linear(g, b, hidden, "enc.head.1");
        PointEncoding { per_point, pooled, embedding }
    }

    /// Unnormalized embedding of one cloud.
    pub fn encode_points(&self, cloud: &PointCloud<T>) -> Embedding<T> {
        let g = Graph::new();
        let b = self.params.bind(&g);
        let pts = g.leaf(cloud.points().clone());
        let out = self.forward(&g, &b, pts, cloud.len());
        let row = g.value(out.embedding).row(0).to_owned();
        Embedding::new(row)
    }

    /// Embeddings for many clouds of equal size, one row each.
    pub fn encode_batch(&self, clouds: &[&PointCloud<T>]) -> Array2<T> {
        if clouds.is_empty() {
            return Array2::zeros((0, self.config.dim));
        }
        let n = clouds[0].len();
        assert!(clouds.iter().all(|c| c.len() == n), "batch clouds need equal point counts");
        let g = Graph::new();
        let b = self.params.bind(&g);
        let views: Vec<_> = clouds.iter().map(|c| c.points().view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("3 columns");
        let pts = g.leaf(stacked);
        let out = self.forward(&g, &b, pts, n);
        let value = g.value(out.embedding).clone();
        value
    }

    pub fn cast<U: Scalar>(&self) -> PointEncoder<U> {
        PointEncoder { config: self.config.clone(), params: self.params.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::smo::{generate_synthetic_corpus, CorpusSpec};
    use rand::seq::SliceRandom;

    fn cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let spec = CorpusSpec { parents: 1, subs_per_parent: 1, samples_per_sub: 1, n_points: n, seed };
        generate_synthetic_corpus::<f64>(&spec).unwrap().remove(0).cloud
    }

    fn small() -> PointEncoderConfig {
        PointEncoderConfig { point_widths: vec![8, 8], head_hidden: 8, dim: 4 }
    }

    #[test]
    fn permutation_invariant() {
        let c = cloud(64, 3);
        let enc = PointEncoder::<f64>::new(PointEncoderConfig::default(), 1);
        let base = enc.encode_points(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut order: Vec<usize> = (0..c.len()).collect();
            order.shuffle(&mut rng);
            let permuted = c.points().select(ndarray::Axis(0), &order);
            let pc = PointCloud::new("p", permuted).unwrap();
            let e = enc.encode_points(&pc);
            let diff = (&e.vec - &base.vec).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff <= 1e-6, "{diff}");
        }
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let enc = PointEncoder::<f64>::zeros(PointEncoderConfig::default());
        let e = enc.encode_points(&cloud(16, 1));
        assert!(e.vec.iter().all(|v| *v == 0.0));
        assert_eq!(e.dim(), 32);
    }

    #[test]
    fn weight_gradient_matches_finite_difference() {
        let c = cloud(16, 2);
        let enc = PointEncoder::<f64>::new(small(), 4);
        let name = "enc.point.1.w";
        let g = Graph::new();
        let b = enc.params.bind(&g);
        let pts = g.leaf(c.points().clone());
        let out = enc.forward(&g, &b, pts, c.len());
        let probe = g.sum(out.embedding);
        let grads = g.backward(probe);
        let analytic = grads.get(b.var(name)).unwrap().clone();
        let numeric = central_difference(enc.params.tensor(name), 1e-4, |w| {
            let mut e = enc.clone();
            *e.params.get_mut(name).unwrap() = w.clone();
            e.encode_points(&c).vec.sum()
        });
        assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn point_gradient_matches_finite_difference() {
        let c = cloud(8, 9);
        let enc = PointEncoder::<f64>::new(small(), 6);
        let g = Graph::new();
        let b = enc.params.bind(&g);
        let pts = g.leaf(c.points().clone());
        let out = enc.forward(&g, &b, pts, c.len());
        let probe = g.sum(out.embedding);
        let analytic = g.backward(probe).get(pts).unwrap().clone();
        let numeric = central_difference(c.points(), 1e-4, |p| {
            enc.encode_points(&PointCloud::new("x", p.clone()).unwrap()).vec.sum()
        });
        assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn batch_matches_single() {
        let enc = PointEncoder::<f64>::new(PointEncoderConfig::default(), 2);
        let (a, b) = (cloud(32, 1), cloud(32, 2));
        let batch = enc.encode_batch(&[&a, &b]);
        assert_eq!(batch.row(1), enc.encode_points(&b).vec);
    }
}
