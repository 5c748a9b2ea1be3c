//! Joint view feature, contrastive and classification objectives, training
//! step and checkpoints.

pub mod batch;
pub mod checkpoint;
pub mod jma;
pub mod objective;
pub mod train;

pub use batch::{BatchBuilder, FeatureCache};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TensorEntry, CHECKPOINT_VERSION};
pub use jma::{contrastive_graph, contrastive_loss, joint_feature, joint_feature_graph, JointFeature};
pub use objective::{
    parent_classification_loss, AlignModel, Batch, ClassifierHead, LossBreakdown, LossVars, LossWeights, ModelConfig,
    ObjectiveMode,
};
pub use train::{train_step, StepConfig, StepMetrics, TrainState};
