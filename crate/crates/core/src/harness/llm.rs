//! Caption-bridge stage on top of a pretrained run.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::harness::pretrain::{load_run, LoadedRun};
use crate::llm::{
    build_conversations, default_templates, llm_train_step, pretrain_lm, read_captions, read_conversations, write_conversations,
    write_decoded, BridgeExample, BridgeModel, BridgeState, BridgeStepConfig, Conversation, DecodedCaption, LmConfig,
    Projector, ProjectorConfig, TinyCausalLM, Vocab,
};
use crate::optim::AdamWConfig;
use crate::params::Params;

const STREAM_CONVERSATIONS: u64 = 5;
const STREAM_LM_INIT: u64 = 6;
const STREAM_LM_PRETRAIN: u64 = 7;
const STREAM_PROJECTOR: u64 = 8;
const STREAM_BRIDGE_BATCHES: u64 = 9;

/// Files of the caption stage inside a run directory.
#[derive(Debug, Clone)]
pub struct LlmPaths {
    pub root: PathBuf,
}

impl LlmPaths {
    pub fn new(run_dir: &Path) -> Self {
        Self { root: run_dir.join("llm") }
    }

    pub fn conversations(&self) -> PathBuf {
        self.root.join("conversations.jsonl")
    }

    pub fn heldout_conversations(&self) -> PathBuf {
        self.root.join("heldout_conversations.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("bridge.jmck")
    }

    pub fn steps(&self) -> PathBuf {
        self.root.join("steps.jsonl")
    }

    pub fn decoded(&self) -> PathBuf {
        self.root.join("decoded.jsonl")
    }

    pub fn heldout_decoded(&self) -> PathBuf {
        self.root.join("heldout_decoded.jsonl")
    }
}

/// Caption of a synthetic sample.
pub fn caption_for(sub: &str) -> String {
    format!("a {sub} shape")
}

/// `count` sample indices spread evenly over `pool`.
fn spread(pool: &[usize], count: usize) -> Vec<usize> {
    let count = count.min(pool.len());
    (0..count).map(|i| pool[i * pool.len() / count]).collect()
}

/// Training and held-out conversations generated from the run's corpus.
pub fn corpus_conversations(run: &LoadedRun) -> Result<(Vec<Conversation>, Vec<Conversation>)> {
    let caps = |idx: Vec<usize>| -> Vec<(String, String)> {
        idx.iter().map(|&i| (run.data.entries[i].cloud.id.clone(), caption_for(&run.data.entries[i].sub))).collect()
    };
    let seed = derive_seed(run.config.seed, &[STREAM_CONVERSATIONS]);
    let templates = default_templates();
    let train = build_conversations(&caps(spread(&run.data.train, run.config.llm.num_records)), &templates, seed)?;
    let heldout = build_conversations(&caps(run.data.heldout.clone()), &templates, seed ^ 1)?;
    Ok((train, heldout))
}

/// Write the conversation files of a run; returns the training file path.
///
/// With `captions`, conversations are built from that `{id, caption}` file
/// instead of the synthetic captions and no held-out file is written.
pub fn cmd_make_conversations(run_dir: &Path, captions: Option<&Path>) -> Result<PathBuf> {
    let run = load_run(run_dir, None)?;
    let paths = LlmPaths::new(run_dir);
    fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let train = match captions {
        Some(p) => {
            let seed = derive_seed(run.config.seed, &[STREAM_CONVERSATIONS]);
            build_conversations(&read_captions(p)?, &default_templates(), seed)?
        }
        None => {
            let (train, heldout) = corpus_conversations(&run)?;
            write_conversations(&paths.heldout_conversations(), &heldout)?;
            train
        }
    };
    write_conversations(&paths.conversations(), &train)?;
    Ok(paths.conversations())
}

fn examples(run: &LoadedRun, vocab: &Vocab, convs: &[Conversation]) -> Result<Vec<BridgeExample<f32>>> {
    let by_id: HashMap<&str, usize> =
        run.data.entries.iter().enumerate().map(|(i, e)| (e.cloud.id.as_str(), i)).collect();
    convs
        .iter()
        .map(|c| {
            let &i = by_id
                .get(c.id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("conversation id {:?} is not a sample of the run", c.id)))?;
            Ok(BridgeExample { cloud: run.data.entries[i].cloud.clone(), record: c.render(vocab)? })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub lr_main: f64,
    pub lr_low: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmReport {
    pub lm_pretrain_final_loss: Option<f64>,
    pub steps: Vec<StepRow>,
    pub lm_checksum_before: String,
    pub lm_checksum_after: String,
    pub decoded: Vec<DecodedCaption>,
    pub heldout: Vec<DecodedCaption>,
}

impl LlmReport {
    pub fn exact_matches(&self) -> usize {
        self.decoded.iter().filter(|d| d.exact_match).count()
    }
}

fn decode_all(model: &BridgeModel<f32>, exs: &[BridgeExample<f32>], max_len: usize) -> Result<Vec<DecodedCaption>> {
    exs.iter()
        .map(|ex| {
            let ids = model.decode(ex, max_len)?;
            let answer = ex.record.answer_ids();
            Ok(DecodedCaption {
                id: ex.record.conversation.id.clone(),
                prediction: model.vocab.decode(&ids),
                exact_match: ids == answer[..answer.len() - 1],
            })
        })
        .collect()
}

/// Training and held-out conversations of a run.
///
/// An explicit file (argument, then `llm.conversations`) is used alone.
/// Otherwise the files written by `make-conversations` are read when present
/// and generated in memory when not.
fn run_conversations(run: &LoadedRun, explicit: Option<&Path>) -> Result<(Vec<Conversation>, Vec<Conversation>)> {
    if let Some(p) = explicit.or(run.config.llm.conversations.as_deref()) {
        return Ok((read_conversations(p)?, Vec::new()));
    }
    let paths = LlmPaths::new(&run.paths.root);
    let (gen_train, gen_held) = corpus_conversations(run)?;
    let train = if paths.conversations().exists() { read_conversations(&paths.conversations())? } else { gen_train };
    let held =
        if paths.heldout_conversations().exists() { read_conversations(&paths.heldout_conversations())? } else { gen_held };
    Ok((train, held))
}

fn lm_optimizer(lr: f64) -> AdamWConfig {
    AdamWConfig { lr, weight_decay: 0.0, ..AdamWConfig::default() }
}

/// Pretrain the language model, train projector and encoder on the
/// conversations, save the bridge and decode training and held-out records.
pub fn cmd_llm_train(run_dir: &Path, conversations: Option<&Path>) -> Result<LlmReport> {
    let run = load_run(run_dir, None)?;
    let cfg = &run.config;
    let q = &cfg.llm;
    let paths = LlmPaths::new(run_dir);
    fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;

    let (train_convs, heldout_convs) = run_conversations(&run, conversations)?;
    let vocab = Vocab::build(train_convs.iter().chain(&heldout_convs).flat_map(|c| c.texts()));
    vocab.save(&paths.vocab())?;
    let train = examples(&run, &vocab, &train_convs)?;
    let heldout = examples(&run, &vocab, &heldout_convs)?;

    let lm_cfg = LmConfig { vocab_size: vocab.len(), width: q.lm_width, blocks: q.lm_blocks, heads: q.lm_heads, ffn: q.lm_ffn };
    let mut lm = TinyCausalLM::<f32>::new(lm_cfg, derive_seed(cfg.seed, &[STREAM_LM_INIT]))?;
    let lm_records: Vec<_> = train.iter().chain(&heldout).map(|e| e.record.clone()).collect();
    let pre = pretrain_lm(
        &mut lm,
        &vocab,
        &lm_records,
        q.lm_pretrain_steps,
        q.batch_size,
        lm_optimizer(q.lm_lr),
        derive_seed(cfg.seed, &[STREAM_LM_PRETRAIN]),
    )?;
    let projector = Projector::new(
        ProjectorConfig { in_dim: run.model.encoder.config.pooled_width(), out_dim: q.lm_width, layers: q.projector_layers },
        derive_seed(cfg.seed, &[STREAM_PROJECTOR]),
    )?;
    let model = BridgeModel { encoder: run.model.encoder.clone(), projector, lm, vocab, num_tokens: q.num_point_tokens };
    let before = model.lm.checksum();
    let step_cfg = BridgeStepConfig { optimizer: lm_optimizer(q.lr_main), lr_main: q.lr_main, lr_low: q.lr_low, total_steps: q.steps };
    let mut state = BridgeState::new(model, step_cfg.optimizer);

    let steps_path = paths.steps();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&steps_path)
        .map_err(|e| Error::io(&steps_path, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_BRIDGE_BATCHES]));
    let mut queue: Vec<usize> = Vec::new();
    let mut rows = Vec::with_capacity(q.steps as usize);
    for _ in 0..q.steps {
        let mut batch = Vec::with_capacity(q.batch_size);
        while batch.len() < q.batch_size.min(train.len()) {
            if queue.is_empty() {
                queue = (0..train.len()).collect();
                queue.shuffle(&mut rng);
            }
            batch.push(&train[queue.pop().expect("refilled")]);
        }
        let m = llm_train_step(&mut state, &batch, &step_cfg)?;
        let row = StepRow { step: m.step + 1, lr_main: m.lr_main, lr_low: m.lr_low, loss: m.loss };
        writeln!(log, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&steps_path, e))?;
        rows.push(row);
    }
    save_bridge(&paths.checkpoint(), &state.model, &run)?;

    let decoded = decode_all(&state.model, &train, q.max_decode_len)?;
    let held = decode_all(&state.model, &heldout, q.max_decode_len)?;
    write_decoded(&paths.decoded(), &decoded)?;
    write_decoded(&paths.heldout_decoded(), &held)?;
    Ok(LlmReport {
        lm_pretrain_final_loss: pre.last().copied(),
        steps: rows,
        lm_checksum_before: before,
        lm_checksum_after: state.model.lm.checksum(),
        decoded,
        heldout: held,
    })
}

fn save_bridge(path: &Path, model: &BridgeModel<f32>, run: &LoadedRun) -> Result<()> {
    let mut all = Params::new();
    all.extend(model.encoder.params.clone());
    all.extend(model.projector.params.clone());
    all.extend(model.lm.params.clone());
    let meta = CheckpointMeta { config_hash: run.config.hash()?, ..CheckpointMeta::default() };
    save_checkpoint(path, &meta, &all)
}

/// Load the trained bridge of a run.
pub fn load_bridge(run: &LoadedRun) -> Result<BridgeModel<f32>> {
    let paths = LlmPaths::new(&run.paths.root);
    let vocab = Vocab::load(&paths.vocab())?;
    let (_, tensors) = load_checkpoint::<f32>(&paths.checkpoint())?;
    let q = &run.config.llm;
    let mut encoder = run.model.encoder.clone();
    let mut projector = Projector::<f32>::new(
        ProjectorConfig { in_dim: encoder.config.pooled_width(), out_dim: q.lm_width, layers: q.projector_layers },
        0,
    )?;
    let lm_cfg = LmConfig { vocab_size: vocab.len(), width: q.lm_width, blocks: q.lm_blocks, heads: q.lm_heads, ffn: q.lm_ffn };
    let mut lm = TinyCausalLM::<f32>::new(lm_cfg, 0)?;
    for params in [&mut encoder.params, &mut projector.params, &mut lm.params] {
        for (name, t) in params.iter_mut() {
            let src = tensors.get(name).ok_or_else(|| Error::format("bridge checkpoint", format!("missing {name}")))?;
            if src.dim() != t.dim() {
                return Err(Error::format("bridge checkpoint", format!("{name} has shape {:?}", src.dim())));
            }
            t.assign(src);
        }
    }
    Ok(BridgeModel { encoder, projector, lm, vocab, num_tokens: q.num_point_tokens })
}

/// Decode a conversation file (default: the run's training conversations) with the trained bridge.
pub fn cmd_llm_decode(run_dir: &Path, conversations: Option<&Path>, out: Option<&Path>) -> Result<Vec<DecodedCaption>> {
    let run = load_run(run_dir, None)?;
    let model = load_bridge(&run)?;
    let paths = LlmPaths::new(run_dir);
    let convs = run_conversations(&run, conversations)?.0;
    let exs = examples(&run, &model.vocab, &convs)?;
    let decoded = decode_all(&model, &exs, run.config.llm.max_decode_len)?;
    write_decoded(&out.map_or_else(|| paths.decoded(), Path::to_path_buf), &decoded)?;
    Ok(decoded)
}
