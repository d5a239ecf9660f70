//! Lossy base layer plus patch-wise arithmetic coding of the residual.

pub mod container;
pub mod image;
pub mod lossy;
pub mod models;
pub mod pipeline;

use crate::coder::CoderError;
use crate::model::ModelError;
use image::Image;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("images must have at least one row and one column")]
    EmptyImage,
    #[error("image: {0}")]
    Image(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("lossy backend {backend}: {reason}")]
    Backend { backend: String, reason: String },
    #[error("malformed container: {0}")]
    Container(String),
    #[error("checkpoint hash {actual:016x} does not match container ({expected:016x})")]
    HashMismatch { expected: u64, actual: u64 },
    #[error("model does not fit this container or image: {0}")]
    ModelMismatch(String),
    #[error("image checksum mismatch: residual data is corrupt")]
    ChecksumMismatch,
    #[error("patch {patch}: {source}")]
    Coder {
        patch: usize,
        #[source]
        source: CoderError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("worker pool: {0}")]
    Workers(String),
}

/// `x - x_l` per sample, interleaved like the images.
pub fn compute_residual(x: &Image, lossy: &Image) -> Result<Vec<i32>, CodecError> {
    same_dims(x, lossy)?;
    Ok(x.data().iter().zip(lossy.data()).map(|(&a, &b)| a as i32 - b as i32).collect())
}

/// Inverse of [`compute_residual`].
pub fn apply_residual(lossy: &Image, residual: &[i32]) -> Result<Image, CodecError> {
    if residual.len() != lossy.subpixels() {
        return Err(CodecError::DimMismatch(format!(
            "{} residuals for {} samples",
            residual.len(),
            lossy.subpixels()
        )));
    }
    let mut data = Vec::with_capacity(residual.len());
    for (&b, &r) in lossy.data().iter().zip(residual) {
        let v = b as i32 + r;
        if !(0..=255).contains(&v) {
            return Err(CodecError::Image(format!("reconstructed sample {v} out of range")));
        }
        data.push(v as u8);
    }
    Image::new(lossy.width(), lossy.height(), lossy.channels(), data)
}

fn same_dims(a: &Image, b: &Image) -> Result<(), CodecError> {
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(CodecError::DimMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Row-major tiling by `p x p` patches; the last row and column may be
/// narrower.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rects: Vec<PatchRect>,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch: usize) -> Self {
        let mut rects = Vec::with_capacity(width.div_ceil(patch) * height.div_ceil(patch));
        for y in (0..height).step_by(patch) {
            for x in (0..width).step_by(patch) {
                rects.push(PatchRect {
                    x,
                    y,
                    width: patch.min(width - x),
                    height: patch.min(height - y),
                });
            }
        }
        PatchGrid { patch, rects }
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }
}

/// Interleaved samples of `rect`.
pub fn patch_samples(img: &Image, rect: &PatchRect) -> Vec<u8> {
    let c = img.channels();
    let mut out = Vec::with_capacity(rect.width * rect.height * c);
    for y in rect.y..rect.y + rect.height {
        let start = (y * img.width() + rect.x) * c;
        out.extend_from_slice(&img.data()[start..start + rect.width * c]);
    }
    out
}

/// Residuals of `rect` in coding order: channel-major, raster within a plane.
pub fn patch_residuals(residual: &[i32], width: usize, channels: usize, rect: &PatchRect) -> Vec<i32> {
    let mut out = Vec::with_capacity(rect.width * rect.height * channels);
    for c in 0..channels {
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                out.push(residual[(y * width + x) * channels + c]);
            }
        }
    }
    out
}

/// Writes coding-order residuals of `rect` back into an interleaved buffer.
pub fn scatter_residuals(ordered: &[i32], residual: &mut [i32], width: usize, channels: usize, rect: &PatchRect) {
    let mut it = ordered.iter();
    for c in 0..channels {
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                residual[(y * width + x) * channels + c] = *it.next().expect("length checked");
            }
        }
    }
}
