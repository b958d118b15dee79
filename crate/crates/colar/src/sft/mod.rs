//! Supervised fine-tuning: batch packing, token and latent losses, and the
//! training loop.

pub mod batch;
pub mod loss;
pub mod train;

pub use batch::{build_batch, SftBatch, IGNORE};
pub use loss::{latent_nll, latent_soft_mse, sft_forward_loss, LatentLossKind, SftLossConfig};
pub use train::{train_sft, CompressionChoice, SftReport, SftTrainConfig};
