//! `encode` and `decode`: lossy base, patch residual streams, container.

use super::container::Container;
use super::image::Image;
use super::lossy::LossyBackend;
use super::models::{ImageModel, ResidualModel};
use super::{apply_residual, compute_residual, patch_residuals, patch_samples, scatter_residuals};
use super::{CodecError, PatchGrid, PatchRect};
use crate::coder::{RangeDecoder, RangeEncoder};
use crate::gmm;
use crate::hash::hash64;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Patch worker threads; 0 uses every core, 1 runs serially.
    pub workers: usize,
    /// Append a whole-image checksum.
    pub checksum: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            workers: 0,
            checksum: true,
        }
    }
}

/// Container size in bits per subpixel, split by section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpspReport {
    pub subpixels: u64,
    pub total_bytes: u64,
    pub lossy_bytes: u64,
    pub residual_bytes: u64,
}

impl BpspReport {
    pub fn header_bytes(&self) -> u64 {
        self.total_bytes - self.lossy_bytes - self.residual_bytes
    }

    fn per_subpixel(&self, bytes: u64) -> f64 {
        8.0 * bytes as f64 / self.subpixels as f64
    }

    pub fn total(&self) -> f64 {
        self.per_subpixel(self.total_bytes)
    }

    pub fn lossy(&self) -> f64 {
        self.per_subpixel(self.lossy_bytes)
    }

    pub fn residual(&self) -> f64 {
        self.per_subpixel(self.residual_bytes)
    }

    pub fn header(&self) -> f64 {
        self.per_subpixel(self.header_bytes())
    }
}

/// Image fingerprint stored when checksums are enabled.
pub fn image_checksum(img: &Image) -> u64 {
    hash64(&img.to_pnm())
}

fn run_patches<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>, CodecError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CodecError> + Send + Sync,
{
    if workers == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CodecError::Workers(e.to_string()))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

fn check_model(model: &dyn ResidualModel) -> Result<(), CodecError> {
    if model.patch_size() == 0 || model.patch_size() > u16::MAX as usize {
        return Err(CodecError::ModelMismatch(format!("patch size {}", model.patch_size())));
    }
    if model.mixtures() > u8::MAX as usize {
        return Err(CodecError::ModelMismatch(format!("{} mixtures", model.mixtures())));
    }
    Ok(())
}

fn encode_patch(
    image_model: &dyn ImageModel,
    lossy: &Image,
    residual: &[i32],
    rect: &PatchRect,
) -> Result<Vec<u8>, CodecError> {
    let samples = patch_samples(lossy, rect);
    let ordered = patch_residuals(residual, lossy.width(), lossy.channels(), rect);
    let mut pm = image_model.patch(&samples, rect.width, rect.height)?;
    let mut enc = RangeEncoder::new();
    for &r in &ordered {
        let table = pm.next_table()?;
        enc.encode(&table, gmm::symbol_of(r));
        pm.advance(r)?;
    }
    Ok(enc.finish())
}

fn decode_patch(
    image_model: &dyn ImageModel,
    lossy: &Image,
    rect: &PatchRect,
    stream: &[u8],
    index: usize,
) -> Result<Vec<i32>, CodecError> {
    let coder = |source| CodecError::Coder { patch: index, source };
    let samples = patch_samples(lossy, rect);
    let mut pm = image_model.patch(&samples, rect.width, rect.height)?;
    let mut dec = RangeDecoder::new(stream).map_err(coder)?;
    let n = samples.len();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let table = pm.next_table()?;
        let r = gmm::residual_of(dec.decode(&table).map_err(coder)?);
        pm.advance(r)?;
        out.push(r);
    }
    dec.finish().map_err(coder)?;
    Ok(out)
}

/// Codes `img` as a lossy payload plus one residual stream per patch.
pub fn encode(
    img: &Image,
    backend: &dyn LossyBackend,
    model: &dyn ResidualModel,
    opts: &EncodeOptions,
) -> Result<Container, CodecError> {
    check_model(model)?;
    let (payload, lossy) = backend.encode(img)?;
    let residual = compute_residual(img, &lossy)?;
    let grid = PatchGrid::new(img.width(), img.height(), model.patch_size());
    let image_model = model.prepare(&lossy)?;
    let im: &dyn ImageModel = image_model.as_ref();
    let streams = run_patches(opts.workers, grid.len(), |i| encode_patch(im, &lossy, &residual, &grid.rects[i]))?;
    Ok(Container {
        width: img.width() as u32,
        height: img.height() as u32,
        channels: img.channels() as u8,
        patch: model.patch_size() as u16,
        mixtures: model.mixtures() as u8,
        model_hash: model.fingerprint(),
        backend: backend.id(),
        payload,
        streams,
        checksum: opts.checksum.then(|| image_checksum(img)),
    })
}

/// Inverse of [`encode`]. Refuses containers made with another model or
/// backend.
pub fn decode(
    c: &Container,
    backend: &dyn LossyBackend,
    model: &dyn ResidualModel,
    workers: usize,
) -> Result<Image, CodecError> {
    if c.model_hash != model.fingerprint() {
        return Err(CodecError::HashMismatch {
            expected: c.model_hash,
            actual: model.fingerprint(),
        });
    }
    if c.backend != backend.id() {
        return Err(CodecError::Backend {
            backend: backend.id(),
            reason: format!("container was made with {}", c.backend),
        });
    }
    if c.patch as usize != model.patch_size() || c.mixtures as usize != model.mixtures() {
        return Err(CodecError::ModelMismatch(format!(
            "container uses patch {} with {} mixtures",
            c.patch, c.mixtures
        )));
    }
    let (w, h, ch) = (c.width as usize, c.height as usize, c.channels as usize);
    let grid = PatchGrid::new(w, h, c.patch as usize);
    if grid.len() != c.streams.len() {
        return Err(CodecError::Container(format!(
            "{} streams for {} patches",
            c.streams.len(),
            grid.len()
        )));
    }
    let lossy = backend.decode(&c.payload, w, h, ch)?;
    let image_model = model.prepare(&lossy)?;
    let im: &dyn ImageModel = image_model.as_ref();
    let parts = run_patches(workers, grid.len(), |i| decode_patch(im, &lossy, &grid.rects[i], &c.streams[i], i))?;
    let mut residual = vec![0i32; w * h * ch];
    for (ordered, rect) in parts.iter().zip(&grid.rects) {
        scatter_residuals(ordered, &mut residual, w, ch, rect);
    }
    let img = apply_residual(&lossy, &residual)?;
    if let Some(sum) = c.checksum {
        if sum != image_checksum(&img) {
            return Err(CodecError::ChecksumMismatch);
        }
    }
    Ok(img)
}
