//! Sources of per-subpixel frequency tables for the residual coder.

use super::image::Image;
use super::CodecError;
use crate::coder::FreqTable;
use crate::gmm::ALPHABET;
use crate::hash::hash64;
use crate::model::{Checkpoint, InferenceModel, PatchContext};

/// A residual probability model shared read-only by all patch workers.
pub trait ResidualModel: Send + Sync {
    /// Identifies the model in container headers.
    fn fingerprint(&self) -> u64;
    fn patch_size(&self) -> usize;
    /// Mixture components per prediction (0 when not a mixture model).
    fn mixtures(&self) -> usize;
    /// Per-image state, computed once from the lossy reconstruction.
    fn prepare<'a>(&'a self, lossy: &Image) -> Result<Box<dyn ImageModel + 'a>, CodecError>;
}

pub trait ImageModel: Send + Sync {
    fn patch<'a>(&'a self, lossy: &[u8], width: usize, height: usize) -> Result<Box<dyn PatchModel + 'a>, CodecError>;
}

/// Sequential predictor for one patch.
pub trait PatchModel {
    fn next_table(&mut self) -> Result<FreqTable, CodecError>;
    fn advance(&mut self, residual: i32) -> Result<(), CodecError>;
}

/// The transformer entropy model, run in 32-bit precision.
pub struct NeuralModel {
    inner: InferenceModel<f32>,
    fingerprint: u64,
}

impl NeuralModel {
    pub fn new(ckpt: &Checkpoint) -> Self {
        NeuralModel {
            inner: InferenceModel::new(ckpt),
            fingerprint: ckpt.fingerprint(),
        }
    }

    pub fn channels(&self) -> usize {
        self.inner.config().channels
    }
}

impl ResidualModel for NeuralModel {
    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn patch_size(&self) -> usize {
        self.inner.config().patch
    }

    fn mixtures(&self) -> usize {
        self.inner.config().mixtures
    }

    fn prepare<'a>(&'a self, lossy: &Image) -> Result<Box<dyn ImageModel + 'a>, CodecError> {
        if lossy.channels() != self.channels() {
            return Err(CodecError::ModelMismatch(format!(
                "{}-channel model for a {}-channel image",
                self.channels(),
                lossy.channels()
            )));
        }
        Ok(Box::new(NeuralImage {
            model: &self.inner,
            global: self.inner.global_tokens(lossy)?,
        }))
    }
}

struct NeuralImage<'a> {
    model: &'a InferenceModel<f32>,
    global: Vec<f32>,
}

impl ImageModel for NeuralImage<'_> {
    fn patch<'a>(&'a self, lossy: &[u8], width: usize, height: usize) -> Result<Box<dyn PatchModel + 'a>, CodecError> {
        Ok(Box::new(NeuralPatch(self.model.patch(&self.global, width, height, lossy)?)))
    }
}

struct NeuralPatch<'a>(PatchContext<'a, f32>);

impl PatchModel for NeuralPatch<'_> {
    fn next_table(&mut self) -> Result<FreqTable, CodecError> {
        Ok(self.0.predict_next()?.table())
    }

    fn advance(&mut self, residual: i32) -> Result<(), CodecError> {
        Ok(self.0.push(residual)?)
    }
}

/// Every residual value equally likely.
#[derive(Debug, Clone)]
pub struct UniformModel {
    patch: usize,
    table: FreqTable,
}

impl UniformModel {
    pub fn new(patch: usize) -> Self {
        UniformModel {
            patch: patch.max(1),
            table: FreqTable::uniform(ALPHABET).expect("511 symbols"),
        }
    }
}

impl ResidualModel for UniformModel {
    fn fingerprint(&self) -> u64 {
        hash64(b"uniform residual model")
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn mixtures(&self) -> usize {
        0
    }

    fn prepare<'a>(&'a self, _lossy: &Image) -> Result<Box<dyn ImageModel + 'a>, CodecError> {
        Ok(Box::new(self.clone()))
    }
}

impl ImageModel for UniformModel {
    fn patch<'a>(&'a self, _lossy: &[u8], _w: usize, _h: usize) -> Result<Box<dyn PatchModel + 'a>, CodecError> {
        Ok(Box::new(UniformPatch(&self.table)))
    }
}

struct UniformPatch<'a>(&'a FreqTable);

impl PatchModel for UniformPatch<'_> {
    fn next_table(&mut self) -> Result<FreqTable, CodecError> {
        Ok(self.0.clone())
    }

    fn advance(&mut self, _residual: i32) -> Result<(), CodecError> {
        Ok(())
    }
}
