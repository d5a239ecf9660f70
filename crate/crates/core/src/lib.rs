//! Lossless image coding as a lossy base plus a learned residual.
//!
//! An image is first passed through a lossy backend. The residual between the
//! original and the lossy reconstruction is split into patches and each patch
//! is arithmetic-coded subpixel by subpixel, with a small causal transformer
//! conditioned on the reconstruction predicting a discretized Gaussian
//! mixture for every residual value.
//!
//! Module map:
//!
//! * [`autodiff`]: dense tensors, a define-by-run tape with reverse-mode
//!   gradients, AdamW, and a finite-difference gradient checker.
//! * [`coder`]: frequency tables, PMF quantization and the range coder.
//! * [`gmm`]: discretized mixture PMFs, the training loss and the canonical
//!   parameter rounding that keeps encoder and decoder in lockstep.
//! * [`model`]: the entropy model, its checkpoint format and the KV-cached
//!   inference path.
//! * [`codec`]: images, lossy backends, the container and encode/decode.
//! * [`train`]: patch datasets, the training loop and evaluation.

pub mod autodiff;
pub mod codec;
pub mod coder;
pub mod gmm;
pub mod hash;
pub mod model;
pub mod special;
pub mod train;

pub use codec::container::Container;
pub use codec::image::Image;
pub use codec::lossy::{ExternalBackend, IdentityBackend, LossyBackend, QdownBackend};
pub use codec::pipeline::{decode, encode, BpspReport, EncodeOptions};
pub use coder::{FreqTable, PROB_BITS, PROB_TOTAL};
pub use gmm::{canonical_round, GmmParams, ALPHABET, SIGMA_MIN};
pub use model::{Checkpoint, ModelConfig};
