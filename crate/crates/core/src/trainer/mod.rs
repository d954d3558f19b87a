//! Grouped-advantage policy updates, the gated reflect-and-retry loop,
//! reflection memory and internalization.

mod advantage;
mod checkpoint;
mod config;
mod iteration;
mod loss;
mod memory;

use std::path::PathBuf;

use thiserror::Error;

pub use advantage::{group_advantages, ADVANTAGE_EPS};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Ablation, Algo, FieldError, Internalization, TrainerConfig};
pub use iteration::{
    episode_seed, erl_iteration, rlvr_iteration, Counters, GroupRecord, IterationReport, Learner, UpdateKind,
};
pub(crate) use iteration::STREAM_EVAL;
pub(crate) use iteration::STREAM_BATCH;
pub use loss::{
    clip, distill_loss, k3, kl_divergence, od_loss, policy_loss, surrogate, ClipParams, DistillSample, LossOutput,
    OdSample, SequenceSample, StatePair, TokenRecord, SUPPORT_FLOOR,
};
pub use memory::{memory_update, MemoryState};

use crate::env::EpisodeError;
use crate::policy::PolicyError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("advantage group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("reward is not finite")]
    NonFiniteReward,
    #[error("parameters became non-finite")]
    NonFiniteParameters,
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}
