//! Run configuration and the pretrain, evaluation and retrieval stages.

pub mod config;
pub mod data;
pub mod eval;
pub mod llm;
pub mod pretrain;

pub use config::{RunConfig, OUT_DIR_ENV};
pub use data::{build_tree, default_splits, frozen_encoders, prepare_dataset, Dataset, FrozenPair};
pub use eval::{cmd_eval, cmd_retrieve, desk_metrics, DeskMetrics, EvalReport};
pub use pretrain::{cmd_pretrain, load_run, read_metric_rows, EpochRow, LoadedRun, PretrainOptions, RunManifest, RunPaths};
pub use llm::{cmd_llm_decode, cmd_llm_train, cmd_make_conversations, LlmPaths, LlmReport};
