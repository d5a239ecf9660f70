//! Patch datasets, the training loop and evaluation.

mod dataset;
mod eval;
mod trainer;
pub mod synth;

pub use dataset::{corpus_files, Crop, Entry, PatchDataset};
pub use eval::{evaluate, evaluate_files, image_nll_bits, EvalReport, EvalRow};
pub use trainer::{batch_gradient, batch_loss, train, validation_loss, LogEntry, TrainOutcome, TrainReport};

use crate::autodiff::AutodiffError;
use crate::codec::CodecError;
use crate::model::ModelError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("corpus has no usable images")]
    EmptyCorpus,
    #[error("I/O: {0}")]
    Io(String),
    #[error("non-finite loss or gradient at step {step}; last saved checkpoint is from step {last_saved}")]
    NonFinite { step: u64, last_saved: u64 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Patch crops per optimizer step.
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Lossy backend used to build training pairs, as accepted by
    /// [`crate::codec::lossy::backend_from_spec`].
    pub backend: String,
    pub patch: usize,
    /// Fraction of corpus images held out for validation.
    pub split: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub log_every: u64,
    /// Checkpoint save period in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Gradient worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 32,
            steps: 1000,
            seed: 0,
            backend: "qdown:2".into(),
            patch: 16,
            split: 0.1,
            weight_decay: 0.0,
            clip_norm: 1.0,
            log_every: 10,
            checkpoint_every: 100,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be a finite non-negative number", self.lr));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.patch == 0 {
            return bad("patch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.split) {
            return bad(format!("validation split {} is outside [0, 1)", self.split));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        Ok(())
    }
}
