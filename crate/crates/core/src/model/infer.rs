use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, LOCAL_VOCAB, START_TOKEN};
use super::forward::{self, residual_slot};
use super::layout::Layout;
use super::ModelError;
use crate::autodiff::{kernels, Real, Tape};
use crate::codec::image::Image;
use crate::gmm::{self, GmmParams};

/// Read-only weights in precision `T` for sequential prediction.
#[derive(Debug, Clone)]
pub struct InferenceModel<T: Real> {
    ckpt: Checkpoint,
    layout: Layout,
    w: Vec<Vec<T>>,
}

impl<T: Real> InferenceModel<T> {
    pub fn new(ckpt: &Checkpoint) -> Self {
        InferenceModel {
            layout: ckpt.layout(),
            w: ckpt
                .tensors()
                .iter()
                .map(|t| t.data().iter().map(|&v| T::from_f64(v)).collect())
                .collect(),
            ckpt: ckpt.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.ckpt.config
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    /// Global prompt tokens `[k_g, d]` (positions included) for one lossy
    /// image. The convolutions always run in 64-bit precision.
    pub fn global_tokens(&self, lossy: &Image) -> Result<Vec<T>, ModelError> {
        let cfg = self.config();
        forward::check_image(cfg, lossy)?;
        let mut tape = Tape::inference();
        let vars: Vec<_> = self.ckpt.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let g = forward::global_features(&mut tape, &vars, &self.layout, cfg, lossy)?;
        let pos = &self.w[self.layout.pos];
        Ok(tape
            .value(g)
            .data()
            .iter()
            .zip(pos)
            .map(|(&v, &p)| T::from_f64(v) + p)
            .collect())
    }

    /// Local prompt tokens `[w*h, d]`: summed per-channel pixel embeddings
    /// plus positions.
    pub fn local_tokens(&self, width: usize, height: usize, lossy: &[u8]) -> Result<Vec<T>, ModelError> {
        let probe = forward::PatchInput {
            width,
            height,
            lossy: lossy.to_vec(),
            residuals: vec![0; lossy.len()],
        };
        probe.validate(self.config())?;
        Ok(self.local_tokens_unchecked(&probe))
    }

    fn local_tokens_unchecked(&self, patch: &forward::PatchInput) -> Vec<T> {
        let cfg = self.config();
        let (d, c) = (cfg.d, cfg.channels);
        let table = &self.w[self.layout.local];
        let pos = &self.w[self.layout.pos];
        let slots = forward::local_slots(cfg, patch);
        let mut out = Vec::with_capacity(slots.len() * d);
        for (j, &slot) in slots.iter().enumerate() {
            let mut e = table_row(table, patch.lossy[j * c] as usize, d).to_vec();
            for ch in 1..c {
                add_into(&mut e, table_row(table, ch * LOCAL_VOCAB + patch.lossy[j * c + ch] as usize, d));
            }
            add_into(&mut e, table_row(pos, slot, d));
            out.extend_from_slice(&e);
        }
        out
    }

    /// Starts a patch: runs the prompt through every layer and the start
    /// token, leaving the first prediction ready.
    pub fn patch<'a>(
        &'a self,
        global: &[T],
        width: usize,
        height: usize,
        lossy: &[u8],
    ) -> Result<PatchContext<'a, T>, ModelError> {
        let cfg = *self.config();
        if global.len() != cfg.global_tokens * cfg.d {
            return Err(ModelError::Input(format!(
                "{} global values, expected {}",
                global.len(),
                cfg.global_tokens * cfg.d
            )));
        }
        let probe = forward::PatchInput {
            width,
            height,
            lossy: lossy.to_vec(),
            residuals: vec![0; lossy.len()],
        };
        probe.validate(&cfg)?;
        let d = cfg.d;
        let np = width * height;
        let prompt = cfg.global_tokens + np;
        let total = prompt + cfg.channels * np;

        let mut x = Vec::with_capacity(prompt * d);
        x.extend_from_slice(global);
        x.extend(self.local_tokens_unchecked(&probe));

        let mut ctx = PatchContext {
            model: self,
            width,
            height,
            len: cfg.channels * np,
            position: 0,
            rows: 0,
            keys: vec![Vec::with_capacity(total * d); cfg.layers],
            values: vec![Vec::with_capacity(total * d); cfg.layers],
            head: vec![T::ZERO; 3 * cfg.mixtures],
        };
        ctx.run(&mut x, prompt, prompt);
        ctx.step(START_TOKEN, 0);
        Ok(ctx)
    }
}

fn table_row<T>(table: &[T], i: usize, d: usize) -> &[T] {
    &table[i * d..(i + 1) * d]
}

fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn affine<T: Real>(x: &mut [T], gamma: &[T], beta: &[T]) {
    let d = gamma.len();
    for row in x.chunks_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g;
            *v += b;
        }
    }
}

fn linear<T: Real>(x: &[T], w: &[T], b: &[T], k: usize) -> Vec<T> {
    let cols = b.len();
    let mut out = vec![T::ZERO; x.len() / k * cols];
    kernels::matmul(x, w, k, cols, &mut out);
    for row in out.chunks_mut(cols) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    out
}

/// Per-patch decoding state with a key/value cache per layer.
#[derive(Debug)]
pub struct PatchContext<'a, T: Real> {
    model: &'a InferenceModel<T>,
    width: usize,
    height: usize,
    len: usize,
    position: usize,
    rows: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    head: Vec<T>,
}

impl<'a, T: Real> PatchContext<'a, T> {
    /// Subpixels in this patch.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index of the subpixel the next prediction is for.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Raw head output `[logits; means; raw stds]` for the current position.
    pub fn raw_head(&self) -> &[T] {
        &self.head
    }

    /// Canonically rounded mixture for the current position.
    pub fn predict_next(&self) -> Result<GmmParams, ModelError> {
        if self.position >= self.len {
            return Err(ModelError::PrefixOverlength(self.len));
        }
        let k = self.model.config().mixtures;
        Ok(gmm::canonical_round(&gmm::head_to_params(&self.head, k)))
    }

    /// Appends the true residual at the current position.
    pub fn push(&mut self, residual: i32) -> Result<(), ModelError> {
        if self.position >= self.len {
            return Err(ModelError::PrefixOverlength(self.len));
        }
        if !(gmm::RESIDUAL_MIN..=gmm::RESIDUAL_MAX).contains(&residual) {
            return Err(ModelError::Input(format!("residual {residual} outside [-255, 255]")));
        }
        self.position += 1;
        if self.position < self.len {
            self.step(gmm::symbol_of(residual), self.position);
        }
        Ok(())
    }

    fn step(&mut self, token: usize, target: usize) {
        let m = self.model;
        let cfg = m.config();
        let d = cfg.d;
        let slot = residual_slot(cfg, self.width, self.height, target);
        let mut x = table_row(&m.w[m.layout.residual], token, d).to_vec();
        add_into(&mut x, table_row(&m.w[m.layout.pos], slot, d));
        let prefix = cfg.global_tokens + self.width * self.height;
        self.run(&mut x, 1, prefix);

        let l = &m.layout;
        let mut h = vec![T::ZERO; d];
        kernels::layer_norm_row(&x, &mut h);
        affine(&mut h, &m.w[l.final_g], &m.w[l.final_b]);
        self.head = linear(&h, &m.w[l.head_w], &m.w[l.head_b], d);
    }

    /// Pushes `n` new rows through every layer, extending the caches.
    fn run(&mut self, x: &mut [T], n: usize, prefix: usize) {
        let m = self.model;
        let cfg = m.config();
        let (d, heads) = (cfg.d, cfg.heads);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let first = self.rows;
        let mut probs = vec![T::ZERO; first + n];
        for (li, ix) in m.layout.layers.iter().enumerate() {
            let w = &m.w;
            let mut h = vec![T::ZERO; n * d];
            for (xr, hr) in x.chunks(d).zip(h.chunks_mut(d)) {
                kernels::layer_norm_row(xr, hr);
            }
            affine(&mut h, &w[ix.ln1_g], &w[ix.ln1_b]);
            let q = linear(&h, &w[ix.wq], &w[ix.bq], d);
            self.keys[li].extend(linear(&h, &w[ix.wk], &w[ix.bk], d));
            self.values[li].extend(linear(&h, &w[ix.wv], &w[ix.bv], d));
            let mut a = vec![T::ZERO; n * d];
            for r in 0..n {
                let visible = kernels::visible_keys(first + r, prefix);
                for hd in 0..heads {
                    let off = hd * dh;
                    kernels::attend_row(
                        &q[r * d + off..r * d + off + dh],
                        &self.keys[li],
                        &self.values[li],
                        d,
                        off,
                        visible,
                        scale,
                        &mut probs,
                        &mut a[r * d + off..r * d + off + dh],
                    );
                }
            }
            let o = linear(&a, &w[ix.wo], &w[ix.bo], d);
            add_into(x, &o);

            for (xr, hr) in x.chunks(d).zip(h.chunks_mut(d)) {
                kernels::layer_norm_row(xr, hr);
            }
            affine(&mut h, &w[ix.ln2_g], &w[ix.ln2_b]);
            let mut mid = linear(&h, &w[ix.w1], &w[ix.b1], d);
            for v in mid.iter_mut() {
                *v = kernels::gelu(*v);
            }
            let o = linear(&mid, &w[ix.w2], &w[ix.b2], 4 * d);
            add_into(x, &o);
        }
        self.rows += n;
    }
}
