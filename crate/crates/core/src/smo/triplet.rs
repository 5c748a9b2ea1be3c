//! Training triplets and their on-disk manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smo::render::{CandidateViewSet, ViewImage};
use crate::smo::views::{max_pairwise_difference_deg, sample_window_slots};
use crate::smo::{CategoryTree, CorpusEntry, PointCloud};
use crate::Scalar;

/// A cloud, its window of views, and its (parent, subcategory) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample<T> {
    pub cloud: PointCloud<T>,
    pub views: Vec<ViewImage<T>>,
    pub parent: String,
    pub sub: String,
}

impl<T: Scalar> TripletSample<T> {
    pub fn view_angle_indices(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.angle_index).collect()
    }

    /// Checks the view-count, angle-window and tree-membership invariants.
    pub fn validate(&self, tree: &CategoryTree, omega_deg: f64) -> Result<()> {
        if self.views.is_empty() || self.views.len() > 30 {
            return Err(Error::InvalidArgument(format!("{} views outside [1, 30]", self.views.len())));
        }
        let widest = max_pairwise_difference_deg(&self.views);
        if self.views.len() > 1 && widest >= omega_deg {
            return Err(Error::InvalidArgument(format!(
                "views of {} span {widest} degrees, window is {omega_deg}",
                self.cloud.id
            )));
        }
        if tree.parent_of(&self.sub) != Some(self.parent.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "{:?} is not a child of {:?}",
                self.sub, self.parent
            )));
        }
        Ok(())
    }
}

/// One view draw per corpus entry from a single seeded stream.
///
/// Re-calling with a new seed gives a fresh draw (one per epoch).
pub fn assemble_triplets<T: Scalar>(
    corpus: &[CorpusEntry<T>],
    candidates: &[CandidateViewSet<T>],
    tree: &CategoryTree,
    v: usize,
    omega_deg: f64,
    seed: u64,
) -> Result<Vec<TripletSample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = draw_view_slots(corpus.len(), v, omega_deg, &mut rng)?;
    build_triplets(corpus, candidates, tree, &slots)
}

/// `count` independent window draws from `rng`.
pub fn draw_view_slots<R: Rng>(count: usize, v: usize, omega_deg: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    (0..count).map(|_| sample_window_slots(v, omega_deg, rng)).collect()
}

/// Triplets for explicit per-entry view slots.
pub fn build_triplets<T: Scalar>(
    corpus: &[CorpusEntry<T>],
    candidates: &[CandidateViewSet<T>],
    tree: &CategoryTree,
    slots: &[Vec<usize>],
) -> Result<Vec<TripletSample<T>>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    if candidates.len() != corpus.len() || slots.len() != corpus.len() {
        return Err(Error::DimensionMismatch { expected: corpus.len(), got: candidates.len().min(slots.len()) });
    }
    corpus
        .iter()
        .zip(candidates)
        .zip(slots)
        .map(|((entry, cands), slots)| {
            if tree.parent_of(&entry.sub) != Some(entry.parent.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "{:?} is not a child of {:?}",
                    entry.sub, entry.parent
                )));
            }
            Ok(TripletSample {
                cloud: entry.cloud.clone(),
                views: slots.iter().map(|&s| cands.view(s).clone()).collect(),
                parent: entry.parent.clone(),
                sub: entry.sub.clone(),
            })
        })
        .collect()
}

const PCV_MAGIC: &[u8; 4] = b"PCV1";

/// `"PCV1"`, u32 point count, then `count * 3` little-endian f32.
pub fn write_points<T: Scalar>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(8 + cloud.len() * 12);
    bytes.extend_from_slice(PCV_MAGIC);
    bytes.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for v in cloud.points().iter() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_points<T: Scalar>(path: &Path, id: impl Into<String>) -> Result<PointCloud<T>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != PCV_MAGIC {
        return Err(Error::format("point file", format!("{} lacks the PCV1 header", path.display())));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + count * 12 {
        return Err(Error::format(
            "point file",
            format!("{} declares {count} points but holds {} payload bytes", path.display(), bytes.len() - 8),
        ));
    }
    let values: Vec<T> = bytes[8..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    let points = Array2::from_shape_vec((count, 3), values).expect("length checked");
    PointCloud::new(id, points)
}

/// One line of the triplet manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub parent: String,
    pub sub: String,
    pub points_path: String,
    pub view_angle_indices: Vec<usize>,
}

/// Write `manifest.jsonl` plus one `points/<id>.pcv` file per triplet under `dir`.
pub fn write_manifest<T: Scalar>(dir: &Path, triplets: &[TripletSample<T>]) -> Result<PathBuf> {
    let points_dir = dir.join("points");
    fs::create_dir_all(&points_dir).map_err(|e| Error::io(&points_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut lines = String::new();
    for t in triplets {
        let rel = format!("points/{}.pcv", t.cloud.id);
        write_points(&dir.join(&rel), &t.cloud)?;
        let record = ManifestRecord {
            id: t.cloud.id.clone(),
            parent: t.parent.clone(),
            sub: t.sub.clone(),
            points_path: rel,
            view_angle_indices: t.view_angle_indices(),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
