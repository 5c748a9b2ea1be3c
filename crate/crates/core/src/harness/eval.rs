//! Zero-shot evaluation and retrieval over a trained run.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, FusedImageEncoder};
use crate::error::{Error, Result};
use crate::harness::pretrain::{load_run, LoadedRun};
use crate::smo::{read_view_image, PointCloud};
use crate::zeroshot::{
    apply_split, build_label_bank, rank_gallery, retrieve_clouds, row_embedding, write_metrics, EvalSplit,
    LabelBank, RetrievalResult, SplitMetrics, PROMPT_TEMPLATE,
};
use crate::{derive_seed, Scalar};

const STREAM_QUERY: u64 = 4;

/// Embeddings of `clouds`, one row each, encoded in chunks.
pub fn cloud_embeddings<T: Scalar>(model: &crate::align::AlignModel<T>, clouds: &[&PointCloud<T>]) -> Array2<T> {
    let mut out = Array2::zeros((clouds.len(), model.encoder.config.dim));
    for (k, chunk) in clouds.chunks(32).enumerate() {
        let emb = model.encoder.encode_batch(chunk);
        out.slice_mut(ndarray::s![k * 32..k * 32 + chunk.len(), ..]).assign(&emb);
    }
    out
}

/// Label bank over every subcategory of the run, in code order.
pub fn run_label_bank(run: &LoadedRun) -> Result<LabelBank<f32>> {
    build_label_bank(&run.data.tree.subcategories(), PROMPT_TEMPLATE, &run.frozen.text)
}

/// Similarities of every evaluation sample against the bank, plus their labels.
pub fn eval_scores(run: &LoadedRun, bank: &LabelBank<f32>) -> (Array2<f32>, Vec<String>) {
    let idx = run.data.eval_indices();
    let clouds: Vec<&PointCloud<f32>> = idx.iter().map(|&i| &run.data.entries[i].cloud).collect();
    let labels = idx.iter().map(|&i| run.data.entries[i].sub.clone()).collect();
    (bank.similarities(&cloud_embeddings(&run.model, &clouds)), labels)
}

/// The three desk-scale learning-signal numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeskMetrics {
    /// Held-out samples of trained subcategories, full bank.
    pub seen_top1: f64,
    /// Samples of never-trained subcategories, full bank.
    pub unseen_top1: f64,
    /// Fraction of single-view queries whose own cloud is in the top `k`.
    pub retrieval_hit: f64,
    pub retrieval_k: usize,
}

pub fn desk_metrics(run: &LoadedRun) -> Result<DeskMetrics> {
    let bank = run_label_bank(run)?;
    let (scores, labels) = eval_scores(run, &bank);
    let unseen = run.config.data.unseen.clone();
    let seen = apply_split(&scores, &bank.names, &labels, &EvalSplit { name: "seen".into(), excluded: unseen }, false)?;
    let trained = run.data.trained_subs();
    let unseen_top1 = if run.data.unseen.is_empty() {
        0.0
    } else {
        apply_split(&scores, &bank.names, &labels, &EvalSplit { name: "unseen".into(), excluded: trained }, false)?.top1
    };
    let k = run.config.eval.retrieval_k;
    Ok(DeskMetrics { seen_top1: seen.top1, unseen_top1, retrieval_hit: self_view_hit_rate(run, k)?, retrieval_k: k })
}

/// Held-out clouds of trained subcategories with their embeddings.
pub fn retrieval_gallery(run: &LoadedRun) -> Vec<(String, Embedding<f32>)> {
    let clouds: Vec<&PointCloud<f32>> = run.data.heldout.iter().map(|&i| &run.data.entries[i].cloud).collect();
    let emb = cloud_embeddings(&run.model, &clouds);
    clouds.iter().enumerate().map(|(i, c)| (c.id.clone(), row_embedding(&emb, i))).collect()
}

pub fn fused_image_encoder(run: &LoadedRun) -> FusedImageEncoder<f32> {
    FusedImageEncoder::new(run.frozen.image.clone(), run.model.fusion.clone())
}

/// Query every gallery cloud with one of its own views at a seeded slot.
pub fn self_view_hit_rate(run: &LoadedRun, k: usize) -> Result<f64> {
    let gallery = retrieval_gallery(run);
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("no held-out clouds to retrieve".into()));
    }
    let enc = fused_image_encoder(run);
    let mut hits = 0usize;
    for (n, &i) in run.data.heldout.iter().enumerate() {
        let slot = (derive_seed(run.config.seed, &[STREAM_QUERY, n as u64]) % 30) as usize;
        let res = retrieve_clouds(run.data.candidates[i].view(slot), &gallery, &enc, k)?;
        hits += res.ranked.iter().any(|(id, _)| *id == gallery[n].0) as usize;
    }
    Ok(hits as f64 / gallery.len() as f64)
}

/// Split files to use: explicit paths, else the config's, else the run's generated ones.
fn split_files(run: &LoadedRun, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !explicit.is_empty() {
        return Ok(explicit.to_vec());
    }
    if !run.config.eval.splits.is_empty() {
        return Ok(run.config.eval.splits.clone());
    }
    let dir = run.paths.splits_dir();
    Ok(["all", "medium", "hard"].iter().map(|n| dir.join(format!("{n}.json"))).filter(|p| p.exists()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitMetrics>,
    pub desk: DeskMetrics,
}

/// Evaluate a run on its splits and write `eval.jsonl` into the run directory.
pub fn cmd_eval(run_dir: &Path, splits: &[PathBuf], checkpoint: Option<&Path>) -> Result<EvalReport> {
    let run = load_run(run_dir, checkpoint)?;
    let bank = run_label_bank(&run)?;
    let (scores, labels) = eval_scores(&run, &bank);
    let files = split_files(&run, splits)?;
    let mut metrics = Vec::new();
    if files.is_empty() {
        metrics.push(apply_split(&scores, &bank.names, &labels, &EvalSplit::all(), run.config.eval.shrink_bank)?);
    }
    for f in files {
        let split = EvalSplit::load(&f)?;
        metrics.push(apply_split(&scores, &bank.names, &labels, &split, run.config.eval.shrink_bank)?);
    }
    write_metrics(&run.paths.root.join("eval.jsonl"), &metrics)?;
    Ok(EvalReport { splits: metrics, desk: desk_metrics(&run)? })
}

/// Rank the run's held-out gallery against a `VIM1` image file.
pub fn cmd_retrieve(run_dir: &Path, image: &Path, k: usize) -> Result<RetrievalResult> {
    let run = load_run(run_dir, None)?;
    let img = read_view_image::<f32>(image)?;
    let gallery = retrieval_gallery(&run);
    let enc = fused_image_encoder(&run);
    let mut res = retrieve_clouds(&img, &gallery, &enc, k)?;
    res.query_id = image.file_name().map_or_else(|| image.display().to_string(), |n| n.to_string_lossy().into());
    Ok(res)
}

/// Rank by an explicit query embedding (used for oracle checks).
pub fn retrieve_by_embedding(run: &LoadedRun, query: &Embedding<f32>, k: usize) -> Result<RetrievalResult> {
    rank_gallery("query", query, &retrieval_gallery(run), k)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))
}
