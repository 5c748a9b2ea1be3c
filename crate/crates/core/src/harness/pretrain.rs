//! Pretraining loop with per-epoch checkpoints, metric rows and exact resume.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    load_checkpoint, save_checkpoint, train_step, AlignModel, BatchBuilder, CheckpointMeta, FeatureCache, TrainState,
};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{default_splits, frozen_encoders, prepare_dataset, Dataset, FrozenPair};
use crate::smo::{build_triplets, draw_view_slots, TripletSample};
use crate::zeroshot::PROMPT_TEMPLATE;
use crate::derive_seed;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

const STREAM_MODEL: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_FIXED_VIEWS: u64 = 3;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn tree(&self) -> PathBuf {
        self.root.join("tree.json")
    }

    pub fn splits_dir(&self) -> PathBuf {
        self.root.join("splits")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn latest(&self) -> PathBuf {
        self.checkpoints_dir().join("latest.jmck")
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("epoch-{epoch:04}.jmck"))
    }
}

/// `run.json`: what produced the run and where its artifacts are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub metrics: String,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// One line of `metrics.jsonl`: mean losses over an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRow {
    pub epoch: u64,
    pub steps: u64,
    pub lr: f64,
    pub point_image: f64,
    pub point_text: f64,
    pub text_image: f64,
    pub classification: f64,
    pub total: f64,
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<EpochRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn append_row(path: &Path, row: &EpochRow) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(row)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainOptions {
    /// Continue from `checkpoints/latest.jmck` of an existing run.
    pub resume: bool,
    /// Stop after this many total epochs even if the config asks for more.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub run_dir: PathBuf,
    /// Rows written by this invocation.
    pub rows: Vec<EpochRow>,
    pub epochs_done: u64,
}

fn batches_per_epoch(n: usize, batch: usize) -> u64 {
    let full = n / batch;
    let rest = n % batch;
    (full + usize::from(rest >= 2)) as u64
}

/// Train per `cfg` into `cfg.out_dir`.
pub fn cmd_pretrain(cfg: &RunConfig, opts: PretrainOptions) -> Result<PretrainReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    let config_text = cfg.to_toml()?;
    let hash = cfg.hash()?;
    let data = prepare_dataset::<f32>(cfg)?;
    let frozen = frozen_encoders(cfg)?;
    let model_cfg = cfg.model_config(data.tree.num_parents());
    let steps_per_epoch = batches_per_epoch(data.train.len(), cfg.train.batch_size);
    if steps_per_epoch == 0 {
        return Err(Error::InvalidArgument(format!("{} training samples cannot fill a batch", data.train.len())));
    }
    let step_cfg = cfg.step_config(steps_per_epoch * cfg.train.epochs);

    let (mut state, mut rng, mut manifest, start_epoch) = if opts.resume {
        let manifest = RunManifest::load(&paths.manifest())?;
        if manifest.config_hash != hash {
            return Err(Error::InvalidArgument(format!(
                "config hash {hash} does not match the run's {}",
                manifest.config_hash
            )));
        }
        let (meta, tensors) = load_checkpoint::<f32>(&paths.latest())?;
        let state = TrainState::from_tensors(&model_cfg, cfg.optimizer(), meta.optimizer_step, &tensors)?;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.rng_seed);
        let pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::format("checkpoint", format!("bad rng position {:?}", meta.rng_word_pos)))?;
        rng.set_word_pos(pos);
        (state, rng, manifest, meta.epoch)
    } else {
        for dir in [paths.root.clone(), paths.checkpoints_dir(), paths.splits_dir()] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::write(paths.config(), &config_text).map_err(|e| Error::io(paths.config(), e))?;
        data.tree.save(&paths.tree())?;
        for split in default_splits(&data) {
            split.save(&paths.splits_dir().join(format!("{}.json", split.name.to_lowercase())))?;
        }
        let metrics = paths.metrics();
        if metrics.exists() {
            fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
        }
        let model = AlignModel::new(&model_cfg, derive_seed(cfg.seed, &[STREAM_MODEL]))?;
        let state = TrainState::new(model, cfg.optimizer());
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_TRAIN]));
        let manifest = RunManifest {
            config_hash: hash.clone(),
            code_version: CODE_VERSION.into(),
            metrics: "metrics.jsonl".into(),
            checkpoints: Vec::new(),
        };
        (state, rng, manifest, 0)
    };

    let save = |state: &TrainState<f32>, rng: &ChaCha8Rng, epoch: u64, manifest: &mut RunManifest| -> Result<()> {
        let meta = CheckpointMeta {
            epoch,
            optimizer_step: state.step_count(),
            rng_seed: derive_seed(cfg.seed, &[STREAM_TRAIN]),
            rng_word_pos: rng.get_word_pos().to_string(),
            config_hash: hash.clone(),
        };
        let tensors = state.tensors();
        save_checkpoint(&paths.latest(), &meta, &tensors)?;
        let keep = epoch == 0 || (cfg.train.keep_every > 0 && epoch.is_multiple_of(cfg.train.keep_every));
        if keep {
            let p = paths.epoch_checkpoint(epoch);
            save_checkpoint(&p, &meta, &tensors)?;
            let rel = format!("checkpoints/{}", p.file_name().expect("file").to_string_lossy());
            if !manifest.checkpoints.contains(&rel) {
                manifest.checkpoints.push(rel);
            }
        }
        if !manifest.checkpoints.iter().any(|c| c == "checkpoints/latest.jmck") {
            manifest.checkpoints.push("checkpoints/latest.jmck".into());
        }
        manifest.save(&paths.manifest())
    };
    if !opts.resume {
        save(&state, &rng, 0, &mut manifest)?;
    }

    let builder = BatchBuilder { image: &frozen.image, text: &frozen.text, tree: &data.tree, template: PROMPT_TEMPLATE };
    let mut cache = FeatureCache::new();
    let train_entries: Vec<_> = data.train.iter().map(|&i| data.entries[i].clone()).collect();
    let train_cands: Vec<_> = data.train.iter().map(|&i| data.candidates[i].clone()).collect();
    let fixed_slots = if cfg.data.fixed_views {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_FIXED_VIEWS]));
        Some(draw_view_slots(train_entries.len(), cfg.data.views, cfg.data.omega_deg, &mut r)?)
    } else {
        None
    };

    let end = opts.stop_after.map_or(cfg.train.epochs, |s| s.min(cfg.train.epochs));
    let mut rows = Vec::new();
    for epoch in start_epoch..end {
        let slots = match &fixed_slots {
            Some(s) => s.clone(),
            None => draw_view_slots(train_entries.len(), cfg.data.views, cfg.data.omega_deg, &mut rng)?,
        };
        let triplets = build_triplets(&train_entries, &train_cands, &data.tree, &slots)?;
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let (mut steps, mut last_lr) = (0u64, 0.0);
        for chunk in order.chunks(cfg.train.batch_size).filter(|c| c.len() >= 2) {
            let samples: Vec<&TripletSample<f32>> = chunk.iter().map(|&i| &triplets[i]).collect();
            let batch = builder.build(&samples, &mut cache)?;
            let m = train_step(&mut state, &batch, &step_cfg)?;
            let l = m.loss;
            for (s, v) in sums.iter_mut().zip([l.point_image, l.point_text, l.text_image, l.classification, l.total]) {
                *s += v;
            }
            steps += 1;
            last_lr = m.lr;
        }
        let mean = |i: usize| sums[i] / steps as f64;
        let row = EpochRow {
            epoch: epoch + 1,
            steps: state.step_count(),
            lr: last_lr,
            point_image: mean(0),
            point_text: mean(1),
            text_image: mean(2),
            classification: mean(3),
            total: mean(4),
        };
        save(&state, &rng, epoch + 1, &mut manifest)?;
        append_row(&paths.metrics(), &row)?;
        rows.push(row);
    }
    Ok(PretrainReport { run_dir: paths.root.clone(), rows, epochs_done: end.max(start_epoch) })
}

/// A finished (or interrupted) run loaded back for evaluation.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub paths: RunPaths,
    pub data: Dataset<f32>,
    pub frozen: FrozenPair,
    pub model: AlignModel<f32>,
    pub meta: CheckpointMeta,
}

/// Load config, data and a checkpoint (default: the latest) of a run directory.
pub fn load_run(run_dir: &Path, checkpoint: Option<&Path>) -> Result<LoadedRun> {
    let paths = RunPaths::new(run_dir);
    let config = RunConfig::load(&paths.config())?;
    let data = prepare_dataset::<f32>(&config)?;
    let frozen = frozen_encoders(&config)?;
    let ck = checkpoint.map_or_else(|| paths.latest(), Path::to_path_buf);
    let (meta, tensors) = load_checkpoint::<f32>(&ck)?;
    let mut model = AlignModel::new(&config.model_config(data.tree.num_parents()), 0)?;
    model.set_params(&tensors)?;
    Ok(LoadedRun { config, paths, data, frozen, model, meta })
}
