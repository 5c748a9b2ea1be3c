//! `JMCK` checkpoint files.
//!
//! Layout: `"JMCK"`, u32 format version, u32 manifest byte length, the JSON
//! manifest, then every tensor listed in the manifest as row-major
//! little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::align::objective::{AlignModel, ModelConfig};
use crate::align::train::TrainState;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Params;
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

/// Run position stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: u64,
    pub optimizer_step: u64,
    pub rng_seed: u64,
    /// ChaCha word position, decimal because JSON numbers stop at 2^53.
    pub rng_word_pos: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, meta: &CheckpointMeta, tensors: &Params<T>) -> Result<()> {
    let manifest = Manifest {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: [t.nrows(), t.ncols()] })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + 4 * tensors.num_scalars());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in tensors.iter() {
        for v in t.iter() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointMeta, Params<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::format("checkpoint", format!("{}: {detail}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing JMCK header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = word(8) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    let mut pos = 12 + len;
    let mut params = Params::new();
    for entry in manifest.tensors {
        let [r, c] = entry.shape;
        let raw = bytes.get(pos..pos + 4 * r * c).ok_or_else(|| bad(format!("truncated tensor {}", entry.name)))?;
        pos += 4 * r * c;
        let values = raw.chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64));
        params.insert(entry.name, Array2::from_shape_vec((r, c), values.collect()).expect("sized"));
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((manifest.meta, params))
}

impl<T: Scalar> TrainState<T> {
    /// Model tensors plus `m/<name>` and `v/<name>` optimizer moments.
    pub fn tensors(&self) -> Params<T> {
        let mut all = self.model.params();
        all.extend(self.optimizer.moments());
        all
    }

    pub fn from_tensors(config: &ModelConfig, optimizer: AdamWConfig, step: u64, tensors: &Params<T>) -> Result<Self> {
        let mut model = AlignModel::new(config, 0)?;
        model.set_params(tensors)?;
        Ok(Self { model, optimizer: AdamW::restore(optimizer, step, tensors) })
    }
}
