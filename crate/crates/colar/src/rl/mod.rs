//! Reinforcement learning on top of the supervised model: group rollouts,
//! group-relative advantages, and a clipped-surrogate policy update.

pub mod grpo;
pub mod rollout;
pub mod train;

pub use grpo::{grpo_loss, GrpoConfig, GrpoOut};
pub use rollout::{group_advantages, sample_rollout, Rollout, RolloutConfig};
pub use train::{rl_step, train_rl, RlStepStats, RlTrainConfig};
