//! Orthographic point-splat renderer producing the 30 candidate views.
//!
//! View `k` looks at the origin from azimuth `12k` degrees around the
//! vertical (`z`) axis. Image columns follow the camera-right axis
//! `(-sin a, cos a, 0)` and rows run top to bottom along `z`; both span
//! `[-1, 1]`, which holds any normalized cloud. Each point splats into one
//! pixel and the nearest point wins.
//!
//! Depth is the distance along the viewing axis measured from the plane
//! of the nearest point, plus [`DEPTH_OFFSET`], so foreground depths are
//! strictly positive and background is exactly zero.
//!
//! RGB is height coded: `r = (z + 1) / 2`, `g = 1 - r`, and `b` fades
//! linearly from 1 at the nearest plane to 0 at [`MAX_VIEW_DEPTH`].

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::smo::PointCloud;
use crate::Scalar;

pub const NUM_CANDIDATE_VIEWS: usize = 30;
pub const VIEW_STEP_DEG: f64 = 12.0;
pub const DEPTH_OFFSET: f64 = 0.1;
/// Largest depth a normalized cloud can produce.
pub const MAX_VIEW_DEPTH: f64 = 2.0 + DEPTH_OFFSET;

/// One rendered view: `H x W x 3` colour, `H x W` depth, and its azimuth slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage<T> {
    pub rgb: Array3<T>,
    pub depth: Array2<T>,
    pub angle_index: usize,
}

impl<T: Scalar> ViewImage<T> {
    /// Validates grid sizes, value ranges and the azimuth slot.
    pub fn new(rgb: Array3<T>, depth: Array2<T>, angle_index: usize) -> Result<Self> {
        let (h, w) = depth.dim();
        if h < 8 || w < 8 {
            return Err(Error::InvalidArgument(format!("view grid {h}x{w} is smaller than 8x8")));
        }
        if rgb.dim() != (h, w, 3) {
            return Err(Error::InvalidArgument("rgb grid does not match depth grid".into()));
        }
        if angle_index >= NUM_CANDIDATE_VIEWS {
            return Err(Error::InvalidArgument(format!("angle index {angle_index} outside [0, 30)")));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < T::zero()) {
            return Err(Error::InvalidArgument("depth must be finite and nonnegative".into()));
        }
        if rgb.iter().any(|c| !(*c >= T::zero() && *c <= T::one())) {
            return Err(Error::InvalidArgument("rgb values must lie in [0, 1]".into()));
        }
        Ok(Self { rgb, depth, angle_index })
    }

    pub fn angle_deg(&self) -> f64 {
        VIEW_STEP_DEG * self.angle_index as f64
    }

    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }

    /// Mean depth over foreground pixels, zero for an empty view.
    pub fn mean_depth(&self) -> f64 {
        let (sum, count) = self
            .depth
            .iter()
            .filter(|d| **d > T::zero())
            .fold((0.0, 0usize), |(s, c), d| (s + d.as_f64(), c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Hex SHA-256 of the slot and grid contents, used as a lookup key for
    /// precomputed embedding tables.
    pub fn content_key(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.angle_index as u32).to_le_bytes());
        hasher.update((self.height() as u32).to_le_bytes());
        hasher.update((self.width() as u32).to_le_bytes());
        for v in self.rgb.iter().chain(self.depth.iter()) {
            hasher.update((v.as_f64() as f32).to_le_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The 30 candidate views of one cloud, ordered by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateViewSet<T> {
    views: Vec<ViewImage<T>>,
}

impl<T: Scalar> CandidateViewSet<T> {
    pub fn new(mut views: Vec<ViewImage<T>>) -> Result<Self> {
        views.sort_by_key(|v| v.angle_index);
        let ok = views.len() == NUM_CANDIDATE_VIEWS
            && views.iter().enumerate().all(|(i, v)| v.angle_index == i);
        if !ok {
            return Err(Error::InvalidArgument(
                "candidate set needs exactly one view per slot 0..29".into(),
            ));
        }
        Ok(Self { views })
    }

    pub fn views(&self) -> &[ViewImage<T>] {
        &self.views
    }

    pub fn view(&self, angle_index: usize) -> &ViewImage<T> {
        &self.views[angle_index]
    }
}

fn pixel(coord: f64, size: usize) -> usize {
    let p = ((coord + 1.0) * 0.5 * size as f64).floor();
    p.clamp(0.0, (size - 1) as f64) as usize
}

/// Render one view of `cloud` at slot `angle_index`.
pub fn render_view<T: Scalar>(cloud: &PointCloud<T>, h: usize, w: usize, angle_index: usize) -> Result<ViewImage<T>> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("view grid {h}x{w} is smaller than 8x8")));
    }
    if angle_index >= NUM_CANDIDATE_VIEWS {
        return Err(Error::InvalidArgument(format!("angle index {angle_index} outside [0, 30)")));
    }
    let angle = (VIEW_STEP_DEG * angle_index as f64).to_radians();
    let (s, c) = angle.sin_cos();
    let pts = cloud.points();
    let toward: Vec<f64> = pts
        .rows()
        .into_iter()
        .map(|p| p[0].as_f64() * c + p[1].as_f64() * s)
        .collect();
    let nearest = toward.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut depth = Array2::<f64>::zeros((h, w));
    let mut height = Array2::<f64>::zeros((h, w));
    for (p, &t) in pts.rows().into_iter().zip(&toward) {
        let right = -p[0].as_f64() * s + p[1].as_f64() * c;
        let z = p[2].as_f64();
        let col = pixel(right, w);
        let row = pixel(-z, h);
        let d = nearest - t + DEPTH_OFFSET;
        let cell = depth[[row, col]];
        if cell == 0.0 || d < cell {
            depth[[row, col]] = d;
            height[[row, col]] = z;
        }
    }
    let mut rgb = Array3::<T>::zeros((h, w, 3));
    for ((r, col), &d) in depth.indexed_iter() {
        if d > 0.0 {
            let hc = ((height[[r, col]] + 1.0) * 0.5).clamp(0.0, 1.0);
            let shade = (1.0 - (d - DEPTH_OFFSET) / (MAX_VIEW_DEPTH - DEPTH_OFFSET)).clamp(0.0, 1.0);
            rgb[[r, col, 0]] = T::of(hc);
            rgb[[r, col, 1]] = T::of(1.0 - hc);
            rgb[[r, col, 2]] = T::of(shade);
        }
    }
    ViewImage::new(rgb, depth.mapv(T::of), angle_index)
}

/// All 30 views at azimuths 0, 12, ..., 348 degrees.
pub fn render_candidate_views<T: Scalar>(cloud: &PointCloud<T>, h: usize, w: usize) -> Result<CandidateViewSet<T>> {
    let views = (0..NUM_CANDIDATE_VIEWS)
        .map(|k| render_view(cloud, h, w, k))
        .collect::<Result<Vec<_>>>()?;
    CandidateViewSet::new(views)
}

const VIEW_MAGIC: &[u8; 4] = b"VIM1";

/// `"VIM1"`, u32 angle slot, u32 height, u32 width, then `H * W * 3` rgb and
/// `H * W` depth values as little-endian f32, row-major.
pub fn write_view_image<T: Scalar>(path: &Path, img: &ViewImage<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 16 * img.height() * img.width());
    bytes.extend_from_slice(VIEW_MAGIC);
    for v in [img.angle_index, img.height(), img.width()] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in img.rgb.iter().chain(img.depth.iter()) {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_view_image<T: Scalar>(path: &Path) -> Result<ViewImage<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::format("view image", format!("{}: {detail}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != VIEW_MAGIC {
        return Err(bad("missing VIM1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (angle, h, w) = (word(4), word(8), word(12));
    if bytes.len() != 16 + 16 * h * w {
        return Err(bad("payload size does not match the declared grid"));
    }
    let values: Vec<T> = bytes[16..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    let (rgb, depth) = values.split_at(h * w * 3);
    let rgb = Array3::from_shape_vec((h, w, 3), rgb.to_vec()).expect("sized");
    let depth = Array2::from_shape_vec((h, w), depth.to_vec()).expect("sized");
    ViewImage::new(rgb, depth, angle)
}
