//! Run configuration: TOML schema, profiles and validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{LossWeights, ModelConfig, ObjectiveMode, StepConfig};
use crate::encoders::{PointEncoderConfig, ViewFusionConfig};
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::smo::{CorpusSpec, MAX_VIEW_DEPTH, NUM_CANDIDATE_VIEWS, SHAPE_FAMILIES, SHAPE_MODIFIERS};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "JM3D_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Small synthetic run that fits one CPU core.
    Desk,
    /// Published-scale hyperparameters; not expected to run on a laptop.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub parents: usize,
    pub subs_per_parent: usize,
    pub samples_per_sub: usize,
    pub n_points: usize,
    pub corpus_seed: u64,
    /// Triplet manifest to load instead of generating the synthetic corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Samples per trained subcategory kept out of training.
    pub heldout_per_sub: usize,
    /// Subcategories never trained on.
    pub unseen: Vec<String>,
    pub views: usize,
    pub omega_deg: f64,
    pub image_size: usize,
    /// Draw view windows once instead of every epoch.
    pub fixed_views: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CorpusSpec::default();
        Self {
            parents: c.parents,
            subs_per_parent: c.subs_per_parent,
            samples_per_sub: c.samples_per_sub,
            n_points: c.n_points,
            corpus_seed: c.seed,
            manifest: None,
            heldout_per_sub: 2,
            unseen: vec!["flat cone".into(), "tall torus".into()],
            views: 2,
            omega_deg: 60.0,
            image_size: 32,
            fixed_views: false,
        }
    }
}

impl DataConfig {
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            parents: self.parents,
            subs_per_parent: self.subs_per_parent,
            samples_per_sub: self.samples_per_sub,
            n_points: self.n_points,
            seed: self.corpus_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub point_widths: Vec<usize>,
    pub head_hidden: usize,
    pub dim: usize,
    pub classifier_hidden: usize,
    pub degree_init_scale: f64,
    pub depth_init_std: f64,
    pub sigma_floor: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = PointEncoderConfig::default();
        let f = ViewFusionConfig::default();
        Self {
            point_widths: e.point_widths,
            head_hidden: e.head_hidden,
            dim: e.dim,
            classifier_hidden: 64,
            degree_init_scale: f.degree_init_scale,
            depth_init_std: f.depth_init_std,
            sigma_floor: f.sigma_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrozenSection {
    pub text_seed: u64,
    pub image_seed: u64,
    pub image_grid: usize,
    /// `EMB1` table replacing the stub text encoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_table: Option<PathBuf>,
    /// `EMB1` table replacing the stub image encoder, keyed by view content key.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_table: Option<PathBuf>,
}

impl Default for FrozenSection {
    fn default() -> Self {
        use crate::encoders::frozen::{DEFAULT_IMAGE_GRID, DEFAULT_IMAGE_SEED, DEFAULT_TEXT_SEED};
        Self {
            text_seed: DEFAULT_TEXT_SEED,
            image_seed: DEFAULT_IMAGE_SEED,
            image_grid: DEFAULT_IMAGE_GRID,
            text_table: None,
            image_table: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub temperature: f64,
    pub mode: ObjectiveMode,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            temperature: w.temperature,
            mode: ObjectiveMode::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keep a numbered checkpoint every this many epochs (0 = only the latest).
    pub keep_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            keep_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Split files; empty means the built-in synthetic All/Medium/Hard lists.
    pub splits: Vec<PathBuf>,
    /// Also drop excluded categories from the candidate bank.
    pub shrink_bank: bool,
    pub retrieval_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { splits: Vec::new(), shrink_bank: true, retrieval_k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    /// Point tokens injected per sample.
    pub num_point_tokens: usize,
    /// 1 = linear projector, 2 = two linear layers with a ReLU between.
    pub projector_layers: usize,
    pub lm_width: usize,
    pub lm_blocks: usize,
    pub lm_heads: usize,
    pub lm_ffn: usize,
    pub lm_pretrain_steps: u64,
    pub lm_lr: f64,
    /// Conversations in the training file.
    pub num_records: usize,
    pub steps: u64,
    pub batch_size: usize,
    /// Projector learning rate.
    pub lr_main: f64,
    /// Point-encoder learning rate.
    pub lr_low: f64,
    pub max_decode_len: usize,
    /// Conversation file to train on instead of the generated one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conversations: Option<PathBuf>,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            num_point_tokens: 8,
            projector_layers: 1,
            lm_width: 64,
            lm_blocks: 2,
            lm_heads: 2,
            lm_ffn: 128,
            lm_pretrain_steps: 300,
            lm_lr: 3e-3,
            num_records: 20,
            steps: 500,
            batch_size: 4,
            lr_main: 2e-3,
            lr_low: 2e-5,
            max_decode_len: 24,
            conversations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub encoders: FrozenSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub llm: LlmSection,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            seed: 7,
            profile: Profile::Desk,
            out_dir: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            encoders: FrozenSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            llm: LlmSection::default(),
        }
    }

    /// Published-scale settings: 250 epochs, batch 128, lr 1e-3, 64 point tokens.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.profile = Profile::Paper;
        c.out_dir = PathBuf::from("runs/paper");
        c.data.n_points = 8192;
        c.data.image_size = 224;
        c.data.views = 4;
        c.model.dim = 512;
        c.model.point_widths = vec![128, 512];
        c.model.head_hidden = 512;
        c.model.classifier_hidden = 256;
        c.train.epochs = 250;
        c.train.batch_size = 128;
        c.train.lr = 1e-3;
        c.llm.num_point_tokens = 64;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Hex SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Apply `JM3D_OUT` if it is set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
    }

    pub fn model_config(&self, num_parents: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            encoder: PointEncoderConfig { point_widths: m.point_widths.clone(), head_hidden: m.head_hidden, dim: m.dim },
            fusion: ViewFusionConfig {
                dim: m.dim,
                sigma_floor: m.sigma_floor,
                degree_init_scale: m.degree_init_scale,
                depth_init_std: m.depth_init_std,
                max_depth: MAX_VIEW_DEPTH,
            },
            head_hidden: m.classifier_hidden,
            num_parents,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let t = &self.train;
        AdamWConfig { lr: t.lr, weight_decay: t.weight_decay, beta1: t.beta1, beta2: t.beta2, eps: t.eps }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let l = &self.loss;
        LossWeights { lambda1: l.lambda1, lambda2: l.lambda2, lambda3: l.lambda3, temperature: l.temperature }
    }

    pub fn step_config(&self, total_steps: u64) -> StepConfig {
        StepConfig { optimizer: self.optimizer(), loss: self.loss_weights(), mode: self.loss.mode, total_steps }
    }

    /// Every violated range, each prefixed with its field path.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, field: &str, msg: String| {
            if !ok {
                errs.push(format!("{field}: {msg}"));
            }
        };
        let d = &self.data;
        if d.manifest.is_none() {
            check((1..=SHAPE_FAMILIES.len()).contains(&d.parents), "data.parents", format!("{} not in [1, {}]", d.parents, SHAPE_FAMILIES.len()));
            check(
                (1..=SHAPE_MODIFIERS.len()).contains(&d.subs_per_parent),
                "data.subs_per_parent",
                format!("{} not in [1, {}]", d.subs_per_parent, SHAPE_MODIFIERS.len()),
            );
            check(d.samples_per_sub > d.heldout_per_sub, "data.samples_per_sub", format!("{} must exceed data.heldout_per_sub", d.samples_per_sub));
            check(d.n_points >= 8, "data.n_points", format!("{} below 8", d.n_points));
        }
        check((1..=NUM_CANDIDATE_VIEWS).contains(&d.views), "data.views", format!("{} not in [1, 30]", d.views));
        check(d.omega_deg > 0.0 && d.omega_deg <= 360.0, "data.omega_deg", format!("{} not in (0, 360]", d.omega_deg));
        check(d.image_size >= 8, "data.image_size", format!("{} below 8", d.image_size));
        let m = &self.model;
        check(m.dim >= 2, "model.dim", format!("{} below 2", m.dim));
        check(!m.point_widths.is_empty() && m.point_widths.iter().all(|&w| w > 0), "model.point_widths", "need at least one positive width".into());
        check(m.head_hidden > 0, "model.head_hidden", "must be positive".into());
        check(m.classifier_hidden > 0, "model.classifier_hidden", "must be positive".into());
        check(m.sigma_floor > 0.0, "model.sigma_floor", "must be positive".into());
        check(m.degree_init_scale.is_finite(), "model.degree_init_scale", "must be finite".into());
        check(m.depth_init_std >= 0.0, "model.depth_init_std", "must be nonnegative".into());
        check(self.encoders.image_grid >= 1, "encoders.image_grid", "must be positive".into());
        let l = &self.loss;
        for (name, v) in [("loss.lambda1", l.lambda1), ("loss.lambda2", l.lambda2), ("loss.lambda3", l.lambda3)] {
            check(v.is_finite() && v >= 0.0, name, format!("{v} must be finite and nonnegative"));
        }
        check(l.temperature > 0.0 && l.temperature.is_finite(), "loss.temperature", format!("{} must be positive", l.temperature));
        let t = &self.train;
        check(t.batch_size >= 2, "train.batch_size", format!("{} below 2", t.batch_size));
        check(t.lr >= 0.0 && t.lr.is_finite(), "train.lr", format!("{} must be finite and nonnegative", t.lr));
        check(t.weight_decay >= 0.0, "train.weight_decay", "must be nonnegative".into());
        check((0.0..1.0).contains(&t.beta1), "train.beta1", format!("{} not in [0, 1)", t.beta1));
        check((0.0..1.0).contains(&t.beta2), "train.beta2", format!("{} not in [0, 1)", t.beta2));
        check(t.eps > 0.0, "train.eps", "must be positive".into());
        check(self.eval.retrieval_k >= 1, "eval.retrieval_k", "must be at least 1".into());
        let q = &self.llm;
        check((1..=2).contains(&q.projector_layers), "llm.projector_layers", format!("{} not in [1, 2]", q.projector_layers));
        check(q.lm_width >= 2 && q.lm_heads >= 1 && q.lm_width.is_multiple_of(q.lm_heads), "llm.lm_width", format!("{} must be divisible by llm.lm_heads = {}", q.lm_width, q.lm_heads));
        check(q.lm_blocks >= 1, "llm.lm_blocks", "must be at least 1".into());
        check(q.lm_ffn >= 1, "llm.lm_ffn", "must be at least 1".into());
        check(q.num_records >= 1, "llm.num_records", "must be at least 1".into());
        check(q.batch_size >= 1, "llm.batch_size", "must be at least 1".into());
        check(q.max_decode_len >= 1, "llm.max_decode_len", "must be at least 1".into());
        for (name, v) in [("llm.lm_lr", q.lm_lr), ("llm.lr_main", q.lr_main), ("llm.lr_low", q.lr_low)] {
            check(v >= 0.0 && v.is_finite(), name, format!("{v} must be finite and nonnegative"));
        }
        check(
            d.manifest.is_some() || q.num_point_tokens <= d.n_points,
            "llm.num_point_tokens",
            format!("{} exceeds data.n_points = {}", q.num_point_tokens, d.n_points),
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
