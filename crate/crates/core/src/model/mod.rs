//! Transformer entropy model over `[global][local][start][residuals]` token
//! sequences, with a teacher-forced tape path and a KV-cached inference path.

mod checkpoint;
mod config;
mod forward;
mod infer;
mod layout;
#[cfg(test)]
mod tests;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, CONV_CHANNELS, LOCAL_VOCAB, MIN_GLOBAL_SIDE, RESIDUAL_VOCAB, START_TOKEN};
pub use forward::{forward_train, patch_loss, register_params, tape_forward, PatchInput};
pub use infer::{InferenceModel, PatchContext};
pub use layout::manifest;

use crate::autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {0} not supported")]
    Version(u32),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input does not fit the model: {0}")]
    Input(String),
    #[error("prefix already covers all {0} subpixels of the patch")]
    PrefixOverlength(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}
