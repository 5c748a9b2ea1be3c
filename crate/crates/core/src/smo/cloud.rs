//! Point clouds, the synthetic shape corpus, and point resampling.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{derive_seed, Scalar};

/// An `N x 3` point set with a stable identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    pub id: String,
    points: Array2<T>,
}

impl<T: Scalar> PointCloud<T> {
    /// Validates shape and finiteness; does not normalize.
    pub fn new(id: impl Into<String>, points: Array2<T>) -> Result<Self> {
        if points.ncols() != 3 {
            return Err(Error::DimensionMismatch { expected: 3, got: points.ncols() });
        }
        if points.nrows() == 0 {
            return Err(Error::InvalidArgument("point cloud has no points".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { id: id.into(), points })
    }

    pub fn points(&self) -> &Array2<T> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for row in self.points.rows() {
            for k in 0..3 {
                c[k] += row[k].as_f64();
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Center on the centroid and scale so the farthest point has norm 1.
    pub fn normalized(&self) -> Self {
        let c = self.centroid();
        let mut pts = self.points.mapv(|v| v.as_f64());
        for mut row in pts.rows_mut() {
            for k in 0..3 {
                row[k] -= c[k];
            }
        }
        let max = pts
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if max > 0.0 {
            pts.mapv_inplace(|v| v / max);
        }
        Self { id: self.id.clone(), points: pts.mapv(T::of) }
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud { id: self.id.clone(), points: self.points.mapv(|v| U::of(v.as_f64())) }
    }
}

/// Counts and seed for [`generate_synthetic_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub parents: usize,
    pub subs_per_parent: usize,
    pub samples_per_sub: usize,
    pub n_points: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { parents: 6, subs_per_parent: 2, samples_per_sub: 10, n_points: 256, seed: 7 }
    }
}

/// One generated shape with its two-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry<T> {
    pub cloud: PointCloud<T>,
    pub parent: String,
    pub sub: String,
}

/// Base surfaces, one per parent category.
pub const SHAPE_FAMILIES: [&str; 6] = ["box", "sphere", "cylinder", "cone", "torus", "pyramid"];

/// Anisotropic stretches, one per subcategory within a parent.
pub const SHAPE_MODIFIERS: [&str; 4] = ["tall", "flat", "long", "slim"];

/// Subcategory name for a (modifier, family) pair, e.g. `"tall box"`.
pub fn sub_name(modifier: &str, family: &str) -> String {
    format!("{modifier} {family}")
}

/// Deterministic desk-scale shape corpus.
///
/// Parent `p` is the `p`-th entry of [`SHAPE_FAMILIES`]; its `s`-th
/// subcategory stretches that surface along the axis named by
/// [`SHAPE_MODIFIERS`]. Every sample gets its own stretch jitter, a random
/// yaw and small Gaussian surface noise before normalization.
pub fn generate_synthetic_corpus<T: Scalar>(spec: &CorpusSpec) -> Result<Vec<CorpusEntry<T>>> {
    if spec.n_points < 8 {
        return Err(Error::InvalidArgument(format!(
            "n_points = {} is degenerate, need at least 8",
            spec.n_points
        )));
    }
    if spec.parents == 0 || spec.subs_per_parent == 0 || spec.samples_per_sub == 0 {
        return Err(Error::InvalidArgument("corpus counts must be at least 1".into()));
    }
    if spec.parents > SHAPE_FAMILIES.len() || spec.subs_per_parent > SHAPE_MODIFIERS.len() {
        return Err(Error::InvalidArgument(format!(
            "at most {} parents and {} subcategories per parent are available",
            SHAPE_FAMILIES.len(),
            SHAPE_MODIFIERS.len()
        )));
    }
    let mut out = Vec::with_capacity(spec.parents * spec.subs_per_parent * spec.samples_per_sub);
    for (p, family) in SHAPE_FAMILIES.iter().take(spec.parents).enumerate() {
        for (s, modifier) in SHAPE_MODIFIERS.iter().take(spec.subs_per_parent).enumerate() {
            for k in 0..spec.samples_per_sub {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    spec.seed,
                    &[p as u64, s as u64, k as u64],
                ));
                let raw = sample_shape(family, modifier, spec.n_points, &mut rng);
                let id = format!("{family}-{modifier}-{k:03}");
                let cloud = PointCloud::new(id, raw.mapv(T::of))?.normalized();
                out.push(CorpusEntry {
                    cloud,
                    parent: family.to_string(),
                    sub: sub_name(modifier, family),
                });
            }
        }
    }
    Ok(out)
}

fn sample_shape<R: Rng>(family: &str, modifier: &str, n: usize, rng: &mut R) -> Array2<f64> {
    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let jitter = rng.random_range(0.85..1.15);
    let stretch = match modifier {
        "tall" => [1.0, 1.0, 1.8 * jitter],
        "flat" => [1.0, 1.0, 0.45 * jitter],
        "long" => [1.9 * jitter, 1.0, 1.0],
        _ => [0.55 * jitter, 0.55 * jitter, 1.0],
    };
    let yaw = rng.random_range(0.0..TAU);
    let (sy, cy) = yaw.sin_cos();
    let mut pts = Array2::zeros((n, 3));
    for i in 0..n {
        let p = surface_point(family, rng);
        let x = p[0] * stretch[0];
        let y = p[1] * stretch[1];
        let z = p[2] * stretch[2];
        pts[[i, 0]] = cy * x - sy * y + noise.sample(rng);
        pts[[i, 1]] = sy * x + cy * y + noise.sample(rng);
        pts[[i, 2]] = z + noise.sample(rng);
    }
    pts
}

/// Area-uniform sample on the unit-scale surface of a family.
fn surface_point<R: Rng>(family: &str, rng: &mut R) -> [f64; 3] {
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    let w: f64 = rng.random();
    match family {
        "box" => {
            let face = rng.random_range(0..6usize);
            let a = 2.0 * u - 1.0;
            let b = 2.0 * v - 1.0;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [sign, a, b],
                1 => [a, sign, b],
                _ => [a, b, sign],
            }
        }
        "sphere" => {
            let z = 2.0 * u - 1.0;
            let r = (1.0 - z * z).sqrt();
            let phi = TAU * v;
            [r * phi.cos(), r * phi.sin(), z]
        }
        "cylinder" => {
            // side area 4*pi, caps 2*pi
            let phi = TAU * v;
            if w < 2.0 / 3.0 {
                [phi.cos(), phi.sin(), 2.0 * u - 1.0]
            } else {
                let r = u.sqrt();
                let z = if w < 5.0 / 6.0 { 1.0 } else { -1.0 };
                [r * phi.cos(), r * phi.sin(), z]
            }
        }
        "cone" => {
            // apex at z = 1, unit base at z = -1; lateral area sqrt(5)*pi, base pi
            let phi = TAU * v;
            let lateral = 5f64.sqrt() / (5f64.sqrt() + 1.0);
            let r = u.sqrt();
            if w < lateral {
                [r * phi.cos(), r * phi.sin(), 1.0 - 2.0 * r]
            } else {
                [r * phi.cos(), r * phi.sin(), -1.0]
            }
        }
        "torus" => {
            let (major, minor) = (0.75, 0.3);
            // rejection on the tube angle for area uniformity
            loop {
                let theta = TAU * rng.random::<f64>();
                let phi = TAU * rng.random::<f64>();
                let accept: f64 = rng.random();
                if accept <= (major + minor * theta.cos()) / (major + minor) {
                    let r = major + minor * theta.cos();
                    break [r * phi.cos(), r * phi.sin(), minor * theta.sin() * 2.0];
                }
            }
        }
        _ => {
            // square pyramid, base [-1,1]^2 at z = -1, apex (0,0,1)
            let slant = 5f64.sqrt();
            let base_share = 4.0 / (4.0 + 4.0 * slant);
            if w < base_share {
                [2.0 * u - 1.0, 2.0 * v - 1.0, -1.0]
            } else {
                let side = rng.random_range(0..4usize);
                let (mut a, mut b) = (u, v);
                if a + b > 1.0 {
                    a = 1.0 - a;
                    b = 1.0 - b;
                }
                // triangle (c0, c1, apex)
                let corners = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
                let c0 = corners[side];
                let c1 = corners[(side + 1) % 4];
                let x = c0[0] + a * (c1[0] - c0[0]) - b * c0[0];
                let y = c0[1] + a * (c1[1] - c0[1]) - b * c0[1];
                let z = -1.0 + 2.0 * b;
                [x, y, z]
            }
        }
    }
}

/// Uniformly resample `n` points: without replacement when `n <= N`,
/// with replacement otherwise.
pub fn sample_points<T: Scalar>(cloud: &PointCloud<T>, n: usize, seed: u64) -> Result<PointCloud<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample zero points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = cloud.len();
    let picks: Vec<usize> = if n <= total {
        index::sample(&mut rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..total)).collect()
    };
    let mut pts = Array2::zeros((n, 3));
    for (r, &i) in picks.iter().enumerate() {
        pts.row_mut(r).assign(&cloud.points.row(i));
    }
    PointCloud::new(cloud.id.clone(), pts)
}
