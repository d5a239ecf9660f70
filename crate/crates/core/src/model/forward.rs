use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, LOCAL_VOCAB, MIN_GLOBAL_SIDE, START_TOKEN};
use super::layout::Layout;
use super::ModelError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::codec::image::Image;
use crate::gmm::{self, GmmParams};

/// One patch of a training or coding example.
///
/// `lossy` is interleaved like [`Image`]; `residuals` runs channel-major
/// (all of channel 0 in raster order, then channel 1, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchInput {
    pub width: usize,
    pub height: usize,
    pub lossy: Vec<u8>,
    pub residuals: Vec<i32>,
}

impl PatchInput {
    pub fn subpixels(&self) -> usize {
        self.residuals.len()
    }

    pub(crate) fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let c = cfg.channels;
        if self.width == 0 || self.height == 0 || self.width > cfg.patch || self.height > cfg.patch {
            return Err(ModelError::Input(format!(
                "patch {}x{} does not fit side {}",
                self.width, self.height, cfg.patch
            )));
        }
        let n = self.width * self.height * c;
        if self.lossy.len() != n || self.residuals.len() != n {
            return Err(ModelError::Input(format!(
                "patch holds {} lossy and {} residual samples, expected {n}",
                self.lossy.len(),
                self.residuals.len()
            )));
        }
        if let Some(r) = self.residuals.iter().find(|r| !(gmm::RESIDUAL_MIN..=gmm::RESIDUAL_MAX).contains(*r)) {
            return Err(ModelError::Input(format!("residual {r} outside [-255, 255]")));
        }
        Ok(())
    }
}

/// Registers every checkpoint tensor as a trainable leaf, in manifest order.
pub fn register_params(tape: &mut Tape, ckpt: &Checkpoint) -> Vec<Var> {
    ckpt.tensors().iter().map(|t| tape.param(t.clone())).collect()
}

/// Edge-replicated `[C, H', W']` input in `[-1, 1]` with `H', W' >= 32`.
pub(crate) fn global_input(lossy: &Image) -> Tensor {
    let (w, h, c) = (lossy.width(), lossy.height(), lossy.channels());
    let pw = w.max(MIN_GLOBAL_SIDE);
    let ph = h.max(MIN_GLOBAL_SIDE);
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let v = lossy.get(x.min(w - 1), y.min(h - 1), ch);
                data.push(v as f64 / 127.5 - 1.0);
            }
        }
    }
    Tensor::new(vec![c, ph, pw], data).expect("shape")
}

pub(crate) fn check_image(cfg: &ModelConfig, lossy: &Image) -> Result<(), ModelError> {
    if lossy.channels() != cfg.channels {
        return Err(ModelError::Input(format!(
            "{}-channel image for a {}-channel model",
            lossy.channels(),
            cfg.channels
        )));
    }
    Ok(())
}

/// Convolution stack and pooling; returns `[k_g, d]` without positions.
pub(crate) fn global_features(
    tape: &mut Tape,
    vars: &[Var],
    layout: &Layout,
    cfg: &ModelConfig,
    lossy: &Image,
) -> Result<Var, ModelError> {
    let mut x = tape.constant(global_input(lossy));
    let n = layout.conv_w.len();
    for i in 0..n {
        x = tape.conv2d(x, vars[layout.conv_w[i]], vars[layout.conv_b[i]], 3, 2, 1)?;
        if i + 1 < n {
            x = tape.gelu(x)?;
        }
    }
    let (gh, gw) = cfg.global_grid();
    let pooled = tape.adaptive_avg_pool(x, gh, gw)?;
    let flat = tape.reshape(pooled, &[cfg.d, cfg.global_tokens])?;
    Ok(tape.transpose(flat)?)
}

pub(crate) fn local_indices(cfg: &ModelConfig, patch: &PatchInput, channel: usize) -> Vec<usize> {
    let c = cfg.channels;
    (0..patch.width * patch.height)
        .map(|j| channel * LOCAL_VOCAB + patch.lossy[j * c + channel] as usize)
        .collect()
}

pub(crate) fn local_slots(cfg: &ModelConfig, patch: &PatchInput) -> Vec<usize> {
    (0..patch.height)
        .flat_map(|y| (0..patch.width).map(move |x| cfg.local_slot(y, x)))
        .collect()
}

/// Positional slot of the subpixel at channel-major index `i`.
pub(crate) fn residual_slot(cfg: &ModelConfig, width: usize, height: usize, i: usize) -> usize {
    let plane = width * height;
    let (c, rem) = (i / plane, i % plane);
    cfg.residual_slot(c, rem / width, rem % width)
}

/// Teacher-forced head output `[L, 3K]` for one patch; row `i` predicts
/// residual `i` from the prompts and residuals `0..i`.
pub fn tape_forward(
    tape: &mut Tape,
    vars: &[Var],
    ckpt: &Checkpoint,
    lossy_image: &Image,
    patch: &PatchInput,
) -> Result<Var, ModelError> {
    let cfg = &ckpt.config;
    let layout = ckpt.layout();
    check_image(cfg, lossy_image)?;
    patch.validate(cfg)?;
    let pos = vars[layout.pos];

    let g = global_features(tape, vars, &layout, cfg, lossy_image)?;
    let gslots: Vec<usize> = (0..cfg.global_tokens).collect();
    let gp = tape.embedding(pos, &gslots)?;
    let global = tape.add(g, gp)?;

    let mut local = tape.embedding(vars[layout.local], &local_indices(cfg, patch, 0))?;
    for ch in 1..cfg.channels {
        let e = tape.embedding(vars[layout.local], &local_indices(cfg, patch, ch))?;
        local = tape.add(local, e)?;
    }
    let lp = tape.embedding(pos, &local_slots(cfg, patch))?;
    let local = tape.add(local, lp)?;

    let l = patch.subpixels();
    let mut tokens = Vec::with_capacity(l);
    tokens.push(START_TOKEN);
    tokens.extend(patch.residuals[..l - 1].iter().map(|&r| gmm::symbol_of(r)));
    let rslots: Vec<usize> = (0..l).map(|i| residual_slot(cfg, patch.width, patch.height, i)).collect();
    let re = tape.embedding(vars[layout.residual], &tokens)?;
    let rp = tape.embedding(pos, &rslots)?;
    let resid = tape.add(re, rp)?;

    let prefix = cfg.global_tokens + patch.width * patch.height;
    let mut x = tape.concat_rows(&[global, local, resid])?;
    for ix in &layout.layers {
        let h = tape.layer_norm(x)?;
        let h = tape.mul_row(h, vars[ix.ln1_g])?;
        let h = tape.add_row(h, vars[ix.ln1_b])?;
        let proj = |tape: &mut Tape, w: usize, b: usize| -> Result<Var, ModelError> {
            let y = tape.matmul(h, vars[w])?;
            Ok(tape.add_row(y, vars[b])?)
        };
        let q = proj(tape, ix.wq, ix.bq)?;
        let k = proj(tape, ix.wk, ix.bk)?;
        let v = proj(tape, ix.wv, ix.bv)?;
        let a = tape.attention(q, k, v, cfg.heads, prefix)?;
        let o = tape.matmul(a, vars[ix.wo])?;
        let o = tape.add_row(o, vars[ix.bo])?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x)?;
        let h = tape.mul_row(h, vars[ix.ln2_g])?;
        let h = tape.add_row(h, vars[ix.ln2_b])?;
        let m = tape.matmul(h, vars[ix.w1])?;
        let m = tape.add_row(m, vars[ix.b1])?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, vars[ix.w2])?;
        let m = tape.add_row(m, vars[ix.b2])?;
        x = tape.add(x, m)?;
    }
    let r = tape.slice_rows(x, prefix, l)?;
    let r = tape.layer_norm(r)?;
    let r = tape.mul_row(r, vars[layout.final_g])?;
    let r = tape.add_row(r, vars[layout.final_b])?;
    let y = tape.matmul(r, vars[layout.head_w])?;
    Ok(tape.add_row(y, vars[layout.head_b])?)
}

/// Summed NLL (nats) of one patch's residuals, recorded on `tape`.
pub fn patch_loss(
    tape: &mut Tape,
    vars: &[Var],
    ckpt: &Checkpoint,
    lossy_image: &Image,
    patch: &PatchInput,
) -> Result<Var, ModelError> {
    let head = tape_forward(tape, vars, ckpt, lossy_image, patch)?;
    Ok(gmm::nll_loss_on_tape(tape, head, &patch.residuals, ckpt.config.mixtures)?)
}

/// Mixture parameters for every subpixel of each patch in one parallel pass
/// per patch, in 64-bit precision.
pub fn forward_train(
    ckpt: &Checkpoint,
    batch: &[(&Image, &PatchInput)],
) -> Result<Vec<Vec<GmmParams>>, ModelError> {
    let k = ckpt.config.mixtures;
    batch
        .iter()
        .map(|(img, patch)| {
            let mut tape = Tape::inference();
            let vars = register_params(&mut tape, ckpt);
            let head = tape_forward(&mut tape, &vars, ckpt, img, patch)?;
            let t = tape.value(head);
            Ok((0..t.rows()).map(|i| gmm::head_to_params(t.row(i), k)).collect())
        })
        .collect()
}
