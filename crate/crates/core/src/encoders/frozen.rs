//! Frozen image and text encoders.
//!
//! The stub kinds are seeded random projections that stand in for a
//! pretrained vision-language model. The table kind serves precomputed
//! vectors from an `EMB1` file so real features can be plugged in.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::smo::{ViewImage, MAX_VIEW_DEPTH};
use crate::{derive_seed, Scalar};

pub const DEFAULT_TEXT_SEED: u64 = 0x7e57;
pub const DEFAULT_IMAGE_SEED: u64 = 0x1a6e;
pub const DEFAULT_IMAGE_GRID: usize = 8;
const IMAGE_BIAS_FEATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrozenKind {
    StubText,
    StubImage,
    Table,
}

/// A fixed embedding function: same input, same output, for the process lifetime.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    kind: FrozenKind,
    dim: usize,
    seed: u64,
    grid: usize,
    projection: Option<Array2<f64>>,
    table: HashMap<String, Vec<f32>>,
}

/// Anything that maps a rendered view to an embedding.
pub trait ImageEmbedder<T: Scalar> {
    fn embed_image(&self, img: &ViewImage<T>) -> Result<Embedding<T>>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Per-word character trigrams with `<` and `>` boundary markers.
pub fn char_trigrams(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let marked: Vec<char> = format!("<{}>", word.to_lowercase()).chars().collect();
        for w in marked.windows(3) {
            out.push(w.iter().collect());
        }
    }
    out
}

fn normalize(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

impl FrozenEncoder {
    pub fn stub_text(dim: usize, seed: u64) -> Self {
        Self { kind: FrozenKind::StubText, dim, seed, grid: 0, projection: None, table: HashMap::new() }
    }

    pub fn stub_image(dim: usize, seed: u64, grid: usize) -> Self {
        let features = 5 * grid * grid + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (features as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((dim, features), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { kind: FrozenKind::StubImage, dim, seed, grid, projection: Some(projection), table: HashMap::new() }
    }

    /// Lookup table; every vector must have length `dim`.
    pub fn from_table(dim: usize, table: HashMap<String, Vec<f32>>) -> Result<Self> {
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::format("embedding table", format!("{k:?} has {} values, expected {dim}", v.len())));
        }
        Ok(Self { kind: FrozenKind::Table, dim, seed: 0, grid: 0, projection: None, table })
    }

    pub fn load_table(path: &Path) -> Result<Self> {
        let (dim, table) = read_embedding_table(path)?;
        Self::from_table(dim, table)
    }

    pub fn kind(&self) -> FrozenKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn lookup<T: Scalar>(&self, key: &str) -> Result<Embedding<T>> {
        let v = self.table.get(key).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        let v = normalize(Array1::from_iter(v.iter().map(|&x| x as f64)));
        Ok(Embedding::new(v.mapv(T::of)))
    }

    /// Unit-norm text embedding.
    pub fn encode_text<T: Scalar>(&self, text: &str) -> Result<Embedding<T>> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("cannot encode empty text".into()));
        }
        match self.kind {
            FrozenKind::Table => self.lookup(text),
            FrozenKind::StubImage => Err(Error::InvalidArgument("image encoder cannot encode text".into())),
            FrozenKind::StubText => {
                let mut acc = Array1::<f64>::zeros(self.dim);
                for gram in char_trigrams(text) {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[fnv1a(gram.as_bytes())]));
                    for v in acc.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += z;
                    }
                }
                if acc.iter().all(|v| *v == 0.0) {
                    return Err(Error::InvalidArgument(format!("{text:?} has no alphanumeric content")));
                }
                Ok(Embedding::new(normalize(acc).mapv(T::of)))
            }
        }
    }

    /// Unit-norm image embedding.
    pub fn encode_image<T: Scalar>(&self, img: &ViewImage<T>) -> Result<Embedding<T>> {
        match self.kind {
            FrozenKind::Table => self.lookup(&img.content_key()),
            FrozenKind::StubText => Err(Error::InvalidArgument("text encoder cannot encode images".into())),
            FrozenKind::StubImage => {
                let feats = patch_statistics(img, self.grid);
                let proj = self.projection.as_ref().expect("stub image projection");
                Ok(Embedding::new(normalize(proj.dot(&feats)).mapv(T::of)))
            }
        }
    }
}

impl<T: Scalar> ImageEmbedder<T> for FrozenEncoder {
    fn embed_image(&self, img: &ViewImage<T>) -> Result<Embedding<T>> {
        self.encode_image(img)
    }
}

/// Per patch of a `grid x grid` partition: foreground coverage, then the
/// foreground means of r, g, b and depth (scaled to `[0, 1]`); one constant
/// bias feature at the end.
fn patch_statistics<T: Scalar>(img: &ViewImage<T>, grid: usize) -> Array1<f64> {
    let (h, w) = (img.height(), img.width());
    let grid = grid.min(h).min(w).max(1);
    let mut feats = Array1::zeros(5 * grid * grid + 1);
    for pr in 0..grid {
        for pc in 0..grid {
            let (r0, r1) = (pr * h / grid, (pr + 1) * h / grid);
            let (c0, c1) = (pc * w / grid, (pc + 1) * w / grid);
            let mut sums = [0.0f64; 4];
            let mut fg = 0usize;
            for r in r0..r1 {
                for c in c0..c1 {
                    let d = img.depth[[r, c]].as_f64();
                    if d > 0.0 {
                        fg += 1;
                        for (k, s) in sums.iter_mut().take(3).enumerate() {
                            *s += img.rgb[[r, c, k]].as_f64();
                        }
                        sums[3] += d / MAX_VIEW_DEPTH;
                    }
                }
            }
            let base = 5 * (pr * grid + pc);
            let area = ((r1 - r0) * (c1 - c0)).max(1) as f64;
            feats[base] = fg as f64 / area;
            if fg > 0 {
                for k in 0..4 {
                    feats[base + 1 + k] = sums[k] / fg as f64;
                }
            }
        }
    }
    let last = feats.len() - 1;
    feats[last] = IMAGE_BIAS_FEATURE;
    feats
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// `"EMB1"`, u32 count, u32 dim, then per entry a u32 byte length, the UTF-8
/// key, and `dim` little-endian f32. Entries are written in key order.
pub fn write_embedding_table(path: &Path, dim: usize, table: &HashMap<String, Vec<f32>>) -> Result<()> {
    let mut keys: Vec<&String> = table.keys().collect();
    keys.sort();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(EMB_MAGIC);
    bytes.extend_from_slice(&(table.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    for k in keys {
        let v = &table[k];
        if v.len() != dim {
            return Err(Error::InvalidArgument(format!("{k:?} has {} values, expected {dim}", v.len())));
        }
        bytes.extend_from_slice(&(k.len() as u32).to_le_bytes());
        bytes.extend_from_slice(k.as_bytes());
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_table(path: &Path) -> Result<(usize, HashMap<String, Vec<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::format("embedding table", format!("{}: {detail}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
        return Err(bad("missing EMB1 header"));
    }
    let u32_at = |i: usize| -> Option<u32> { bytes.get(i..i + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap())) };
    let count = u32_at(4).unwrap() as usize;
    let dim = u32_at(8).unwrap() as usize;
    let mut pos = 12;
    let mut table = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(pos).ok_or_else(|| bad("truncated key length"))? as usize;
        pos += 4;
        let key = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated key"))?;
        let key = String::from_utf8(key.to_vec()).map_err(|_| bad("key is not UTF-8"))?;
        pos += len;
        let raw = bytes.get(pos..pos + 4 * dim).ok_or_else(|| bad("truncated vector"))?;
        pos += 4 * dim;
        let vec = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if table.insert(key.clone(), vec).is_some() {
            return Err(bad(&format!("duplicate key {key:?}")));
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((dim, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smo::{render_view, PointCloud};
    use ndarray::{array, Array3};

    fn text() -> FrozenEncoder {
        FrozenEncoder::stub_text(32, DEFAULT_TEXT_SEED)
    }

    fn image() -> FrozenEncoder {
        FrozenEncoder::stub_image(32, DEFAULT_IMAGE_SEED, DEFAULT_IMAGE_GRID)
    }

    #[test]
    fn text_is_deterministic_and_unit_norm() {
        let a: Embedding<f64> = text().encode_text("a 3D representation of tall box").unwrap();
        let b: Embedding<f64> = text().encode_text("a 3D representation of tall box").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn distinct_subcategory_names_separate() {
        let names = ["tall box", "flat box", "tall sphere", "flat sphere", "tall cone", "flat cone"];
        let embs: Vec<Embedding<f64>> = names.iter().map(|n| text().encode_text(n).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert!(embs[i].cosine(&embs[j]) < 0.999, "{} vs {}", names[i], names[j]);
            }
        }
    }

    #[test]
    fn empty_text_rejected() {
        assert!(text().encode_text::<f64>("  ").is_err());
    }

    #[test]
    fn image_stub_separates_blank_from_splat() {
        let blank = ViewImage::<f64>::new(Array3::zeros((16, 16, 3)), Array2::zeros((16, 16)), 0).unwrap();
        let dot = PointCloud::new("d", array![[0.0, 0.0, 0.0]]).unwrap();
        let splat = render_view(&dot, 16, 16, 0).unwrap();
        let a = image().encode_image(&blank).unwrap();
        let b = image().encode_image(&splat).unwrap();
        assert!(a.cosine(&b) < 0.999, "{}", a.cosine(&b));
        assert!((a.norm() - 1.0).abs() <= 1e-6 && (b.norm() - 1.0).abs() <= 1e-6);
        assert_eq!(b, image().encode_image(&splat).unwrap());
    }

    #[test]
    fn table_lookup_and_file_format() {
        let mut table = HashMap::new();
        table.insert("chair".to_string(), vec![3.0f32, 4.0]);
        table.insert("lamp".to_string(), vec![0.0f32, -2.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        write_embedding_table(&path, 2, &table).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"EMB1");
        let enc = FrozenEncoder::load_table(&path).unwrap();
        let e: Embedding<f64> = enc.encode_text("chair").unwrap();
        assert!((e.vec[0] - 0.6).abs() < 1e-7 && (e.vec[1] - 0.8).abs() < 1e-7);
        assert!(matches!(enc.encode_text::<f64>("sofa"), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn truncated_table_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        fs::write(&path, b"EMB1\x01\x00\x00\x00\x02\x00\x00\x00\x01\x00\x00\x00a").unwrap();
        assert!(read_embedding_table(&path).is_err());
    }
}
