//! Zero-shot classification by nearest prompt embedding, evaluation splits,
//! and image-to-cloud retrieval.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, FrozenEncoder, FusedImageEncoder, ImageEmbedder};
use crate::error::{Error, Result};
use crate::smo::ViewImage;
use crate::Scalar;

pub const CLASS_PLACEHOLDER: &str = "[CLASS]";
pub const PROMPT_TEMPLATE: &str = "a 3D representation of [CLASS]";

/// Substitute `class` for every `[CLASS]` in `template`.
pub fn fill_template(template: &str, class: &str) -> Result<String> {
    if !template.contains(CLASS_PLACEHOLDER) {
        return Err(Error::InvalidArgument(format!("template {template:?} lacks {CLASS_PLACEHOLDER}")));
    }
    Ok(template.replace(CLASS_PLACEHOLDER, class))
}

/// Category names with one unit-norm prompt embedding each; the row index is the category code.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBank<T> {
    pub names: Vec<String>,
    pub template: String,
    pub embeddings: Array2<T>,
}

impl<T: Scalar> LabelBank<T> {
    /// Bank from precomputed rows, which are L2-normalized here.
    pub fn from_embeddings(names: Vec<String>, template: &str, embeddings: Array2<T>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("label bank needs at least one category".into()));
        }
        if names.len() != embeddings.nrows() {
            return Err(Error::DimensionMismatch { expected: names.len(), got: embeddings.nrows() });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate category {dup:?}")));
        }
        let mut embeddings = embeddings;
        for mut row in embeddings.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > T::zero() {
                row.mapv_inplace(|v| v / n);
            }
        }
        Ok(Self { names, template: template.to_string(), embeddings })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn code(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Cosine similarity of every row of `queries` with every category.
    pub fn similarities(&self, queries: &Array2<T>) -> Array2<T> {
        let mut q = queries.clone();
        for mut row in q.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > T::zero() {
                row.mapv_inplace(|v| v / n);
            }
        }
        q.dot(&self.embeddings.t())
    }
}

/// Encode `template` filled with each category name.
pub fn build_label_bank<T: Scalar>(categories: &[String], template: &str, enc: &FrozenEncoder) -> Result<LabelBank<T>> {
    if categories.is_empty() {
        return Err(Error::InvalidArgument("label bank needs at least one category".into()));
    }
    let mut rows = Array2::zeros((categories.len(), enc.dim()));
    for (mut row, name) in rows.rows_mut().into_iter().zip(categories) {
        row.assign(&enc.encode_text::<T>(&fill_template(template, name)?)?.vec);
    }
    LabelBank::from_embeddings(categories.to_vec(), template, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub name: String,
    pub code: usize,
    pub similarity: f64,
}

/// Order indices by score descending, ties by index ascending.
fn rank_indices<T: Scalar>(scores: impl Iterator<Item = (usize, T)>) -> Vec<(usize, T)> {
    let mut v: Vec<(usize, T)> = scores.collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    v
}

/// Top-`k` categories by cosine similarity, ties broken by ascending code.
/// `k` is clamped to the bank size.
pub fn classify_zeroshot<T: Scalar>(cloud_emb: &Embedding<T>, bank: &LabelBank<T>, k: usize) -> Vec<Ranked> {
    let q = cloud_emb.normalized();
    let sims = bank.embeddings.dot(&q.vec);
    rank_indices(sims.iter().copied().enumerate())
        .into_iter()
        .take(k)
        .map(|(code, s)| Ranked { name: bank.names[code].clone(), code, similarity: s.as_f64() })
        .collect()
}

/// Named list of categories removed from an evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSplit {
    pub name: String,
    pub excluded: Vec<String>,
}

impl EvalSplit {
    pub fn all() -> Self {
        Self { name: "All".into(), excluded: Vec::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Checks that `hard` removes everything `medium` removes.
pub fn check_split_nesting(medium: &EvalSplit, hard: &EvalSplit) -> Result<()> {
    let hard_set: HashSet<&String> = hard.excluded.iter().collect();
    match medium.excluded.iter().find(|c| !hard_set.contains(c)) {
        Some(c) => Err(Error::InvalidArgument(format!("{c:?} is excluded by {} but not by {}", medium.name, hard.name))),
        None => Ok(()),
    }
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMetrics {
    pub split: String,
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
}

/// Top-1/top-5 accuracy of `scores` (samples x categories, bank order) under `split`.
///
/// Samples whose label is excluded are dropped. With `shrink_bank` the
/// excluded categories are also removed from the candidates.
pub fn apply_split<T: Scalar>(
    scores: &Array2<T>,
    categories: &[String],
    labels: &[String],
    split: &EvalSplit,
    shrink_bank: bool,
) -> Result<SplitMetrics> {
    if scores.ncols() != categories.len() {
        return Err(Error::DimensionMismatch { expected: categories.len(), got: scores.ncols() });
    }
    if scores.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: scores.nrows() });
    }
    let code = |name: &str| categories.iter().position(|c| c == name).ok_or_else(|| Error::UnknownKey(name.to_string()));
    let mut excluded = vec![false; categories.len()];
    for name in &split.excluded {
        excluded[code(name)?] = true;
    }
    let (mut n, mut top1, mut top5) = (0usize, 0usize, 0usize);
    for (row, label) in scores.rows().into_iter().zip(labels) {
        let truth = code(label)?;
        if excluded[truth] {
            continue;
        }
        let ranking = rank_indices(
            row.iter().copied().enumerate().filter(|(c, _)| !(shrink_bank && excluded[*c])),
        );
        let rank = ranking.iter().position(|(c, _)| *c == truth).expect("truth is a candidate");
        n += 1;
        top1 += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("split {} leaves no samples", split.name)));
    }
    Ok(SplitMetrics { split: split.name.clone(), top1: top1 as f64 / n as f64, top5: top5 as f64 / n as f64, n })
}

/// Append `metrics` as JSON lines.
pub fn write_metrics(path: &Path, metrics: &[SplitMetrics]) -> Result<()> {
    let mut text = String::new();
    for m in metrics {
        text.push_str(&serde_json::to_string(m)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// `(cloud id, cosine similarity)`, best first.
    pub ranked: Vec<(String, f64)>,
}

/// Rank a gallery of cloud embeddings by cosine similarity to `query`.
pub fn rank_gallery<T: Scalar>(
    query_id: &str,
    query: &Embedding<T>,
    gallery: &[(String, Embedding<T>)],
    k: usize,
) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("retrieval gallery is empty".into()));
    }
    let mut seen = HashSet::new();
    if let Some((dup, _)) = gallery.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate gallery id {dup:?}")));
    }
    let sims = gallery.iter().map(|(_, e)| query.cosine(e));
    let ranked = rank_indices(sims.enumerate())
        .into_iter()
        .take(k)
        .map(|(i, s)| (gallery[i].0.clone(), s.as_f64()))
        .collect();
    Ok(RetrievalResult { query_id: query_id.to_string(), ranked })
}

/// Encode `image` with `enc` and rank the gallery; the query id is the image content key.
pub fn retrieve_clouds<T: Scalar, E: ImageEmbedder<T>>(
    image: &ViewImage<T>,
    gallery: &[(String, Embedding<T>)],
    enc: &E,
    k: usize,
) -> Result<RetrievalResult> {
    let query = enc.embed_image(image)?;
    rank_gallery(&image.content_key(), &query, gallery, k)
}

impl<T: Scalar> ImageEmbedder<T> for FusedImageEncoder<T> {
    fn embed_image(&self, img: &ViewImage<T>) -> Result<Embedding<T>> {
        self.encode_view(img)
    }
}

/// Stack embeddings as rows.
pub fn stack_embeddings<T: Scalar>(embs: &[Embedding<T>]) -> Array2<T> {
    let dim = embs.first().map_or(0, |e| e.dim());
    let mut out = Array2::zeros((embs.len(), dim));
    for (mut row, e) in out.rows_mut().into_iter().zip(embs) {
        row.assign(&e.vec);
    }
    out
}

/// Row `i` of `m` as an embedding.
pub fn row_embedding<T: Scalar>(m: &Array2<T>, i: usize) -> Embedding<T> {
    Embedding::new(Array1::from_iter(m.row(i).iter().copied()))
}
