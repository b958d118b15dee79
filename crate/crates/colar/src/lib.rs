//! Compressed latent reasoning at desk scale: a small decoder-only
//! transformer that learns to reason in a compressed latent space, trained
//! in two stages (supervised fine-tuning, then GRPO reinforcement learning)
//! on a synthetic arithmetic corpus.

pub mod cli;
pub mod data;
pub mod error;
pub mod infer;
pub mod model;
pub mod rl;
pub mod sft;
pub mod tensor;

pub use error::{Error, Result};
