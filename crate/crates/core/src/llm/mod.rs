//! Point tokens injected into a small causal language model for captioning.

pub mod bridge;
pub mod conversation;
pub mod lm;
pub mod train;
pub mod vocab;

pub use bridge::{
    assemble_input, expanded_targets, extract_point_tokens, point_tokens_graph, project_point_tokens, Projector,
    ProjectorConfig,
};
pub use conversation::{
    build_conversations, default_templates, read_captions, read_conversations, read_decoded, write_conversations,
    write_decoded, CaptionRecord, Conversation, ConversationRecord, DecodedCaption, Layout, DEFAULT_TEMPLATES,
};
pub use lm::{decode_greedy, sft_loss, sft_loss_graph, LmConfig, TinyCausalLM};
pub use train::{llm_train_step, pretrain_lm, BridgeExample, BridgeMetrics, BridgeModel, BridgeState, BridgeStepConfig};
pub use vocab::{detokenize, tokenize, Vocab};
