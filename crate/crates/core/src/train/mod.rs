//! Anchor selection, chain masks, the GRPO / RAPO objectives and the training loop.

mod anchors;
mod config;
mod objective;
mod trainer;

pub use anchors::{
    build_chain_mask, grpo_advantages, select_anchors, window_kl, window_len, Advantages, AnchorPlan,
};
pub use config::{TrainConfig, Variant, CONFIG_KEYS};
pub use objective::{objective, prepare_refs, ObjectiveOutput, PreparedGroup, Refs, SQRT_DELTA};
pub use trainer::{format_targets, format_warmup, task_config, StepMetrics, Trainer};

use crate::env::EnvError;
use crate::policy::{CheckpointError, PolicyError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("every group was filtered out of the batch")]
    EmptyBatch,
    #[error("objective is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
