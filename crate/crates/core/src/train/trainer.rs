use super::{PatchDataset, TrainConfig, TrainError};
use crate::autodiff::{rng, AdamW, AdamWConfig, Tape};
use crate::codec::image::Image;
use crate::model::{patch_loss, register_params, Checkpoint, PatchInput};
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: u64,
    /// Mean batch NLL in nats per subpixel.
    pub loss: f64,
    pub validation: Option<f64>,
    pub wall_secs: f64,
}

/// Machine-readable training summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub parameters: usize,
    pub train_images: usize,
    pub validation_images: usize,
    pub log: Vec<LogEntry>,
    pub wall_secs: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.log.first().map_or(f64::NAN, |e| e.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |e| e.loss)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Summed NLL in nats and the number of subpixels it covers.
pub fn batch_loss(ckpt: &Checkpoint, batch: &[(&Image, PatchInput)]) -> Result<(f64, usize), TrainError> {
    let mut total = 0.0;
    let mut n = 0;
    for (img, p) in batch {
        let mut tape = Tape::inference();
        let vars = register_params(&mut tape, ckpt);
        let l = patch_loss(&mut tape, &vars, ckpt, img, p)?;
        total += tape.value(l).item();
        n += p.subpixels();
    }
    Ok((total, n))
}

/// Summed patch loss in nats and its per-tensor gradient.
type SampleGrad = (f64, Vec<Vec<f64>>);

fn sample_gradient(ckpt: &Checkpoint, img: &Image, p: &PatchInput) -> Result<SampleGrad, TrainError> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, ckpt);
    let l = patch_loss(&mut tape, &vars, ckpt, img, p)?;
    let g = tape.backward(l)?;
    let grads = vars
        .iter()
        .zip(ckpt.tensors())
        .map(|(&v, t)| g.get_or_zeros(v, t.len()))
        .collect();
    Ok((tape.value(l).item(), grads))
}

/// Mean per-subpixel loss and gradient over `batch`. Per-sample results are
/// summed in batch order, so the result does not depend on `pool` size.
pub fn batch_gradient(
    ckpt: &Checkpoint,
    batch: &[(&Image, PatchInput)],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let per_sample: Vec<Result<SampleGrad, TrainError>> = match pool {
        Some(pool) => pool.install(|| batch.par_iter().map(|(img, p)| sample_gradient(ckpt, img, p)).collect()),
        None => batch.iter().map(|(img, p)| sample_gradient(ckpt, img, p)).collect(),
    };
    let n: usize = batch.iter().map(|(_, p)| p.subpixels()).sum();
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = ckpt.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / n as f64;
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss * scale, grads))
}

/// Mean NLL in nats per subpixel over every validation patch.
pub fn validation_loss(ckpt: &Checkpoint, data: &PatchDataset) -> Result<Option<f64>, TrainError> {
    let patches = data.validation_patches();
    if patches.is_empty() {
        return Ok(None);
    }
    let parts: Vec<Result<(f64, usize), TrainError>> = patches
        .par_iter()
        .map(|(img, p)| batch_loss(ckpt, &[(img, p.clone())]))
        .collect();
    let (mut total, mut n) = (0.0, 0);
    for r in parts {
        let (l, k) = r?;
        total += l;
        n += k;
    }
    Ok(Some(total / n as f64))
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

fn is_finite(loss: f64, grads: &[Vec<f64>]) -> bool {
    loss.is_finite() && grads.iter().flatten().all(|g| g.is_finite())
}

/// Trains `init` on crops from `data`. With `checkpoint_out` set, the
/// current parameters are saved atomically every `checkpoint_every` steps
/// and at the end. A non-finite loss stops training without touching the
/// last saved file.
pub fn train(
    cfg: &TrainConfig,
    init: Checkpoint,
    data: &PatchDataset,
    checkpoint_out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.patch != init.config.patch || data.patch != init.config.patch {
        return Err(TrainError::Config(format!(
            "patch {} (config) / {} (dataset) does not match the model's {}",
            cfg.patch, data.patch, init.config.patch
        )));
    }
    if data.train_images().is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| TrainError::Config(format!("worker pool: {e}")))?;
    let start = Instant::now();
    let mut ckpt = init;
    let sizes: Vec<usize> = ckpt.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &sizes,
    );
    let mut params: Vec<Vec<f64>> = ckpt.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut rng = rng::seeded(cfg.seed);
    let mut entries = Vec::new();
    let mut last_saved = ckpt.step;
    let first_step = ckpt.step + 1;
    let last_step = ckpt.step + cfg.steps;
    let io = |e: std::io::Error| TrainError::Io(e.to_string());

    for step in first_step..=last_step {
        let crops: Vec<_> = (0..cfg.batch).map(|_| data.sample_crop(&mut rng)).collect();
        let batch: Vec<(&Image, PatchInput)> = crops.iter().map(|c| data.crop_input(c)).collect();
        let (loss, mut grads) = pool.install(|| batch_gradient(&ckpt, &batch, Some(&pool)))?;
        if !is_finite(loss, &grads) {
            writeln!(log, "step {step}: non-finite loss {loss}; stopping").map_err(io)?;
            return Err(TrainError::NonFinite { step, last_saved });
        }
        clip(&mut grads, cfg.clip_norm);
        {
            let mut p: Vec<&mut [f64]> = params.iter_mut().map(|v| v.as_mut_slice()).collect();
            let g: Vec<&[f64]> = grads.iter().map(|v| v.as_slice()).collect();
            opt.step(&mut p, &g)?;
        }
        ckpt.set_values(&params)?;
        for (p, t) in params.iter_mut().zip(ckpt.tensors()) {
            p.copy_from_slice(t.data());
        }
        ckpt.step = step;

        if step == first_step || step == last_step || (step - first_step + 1).is_multiple_of(cfg.log_every) {
            let validation = if step == first_step || step == last_step {
                validation_loss(&ckpt, data)?
            } else {
                None
            };
            let e = LogEntry {
                step,
                loss,
                validation,
                wall_secs: start.elapsed().as_secs_f64(),
            };
            match e.validation {
                Some(v) => writeln!(
                    log,
                    "step {step:>6}  loss {loss:.4} nats ({:.4} bits)  val {v:.4} nats  {:.1}s",
                    loss / std::f64::consts::LN_2,
                    e.wall_secs
                ),
                None => writeln!(
                    log,
                    "step {step:>6}  loss {loss:.4} nats ({:.4} bits)  {:.1}s",
                    loss / std::f64::consts::LN_2,
                    e.wall_secs
                ),
            }
            .map_err(io)?;
            entries.push(e);
        }
        if let Some(out) = checkpoint_out {
            let periodic = cfg.checkpoint_every > 0 && (step - first_step + 1).is_multiple_of(cfg.checkpoint_every);
            if periodic || step == last_step {
                ckpt.save(out)?;
                last_saved = step;
            }
        }
    }
    let report = TrainReport {
        config: cfg.clone(),
        parameters: ckpt.parameter_count(),
        train_images: data.train_images().len(),
        validation_images: data.validation_images().len(),
        log: entries,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { checkpoint: ckpt, report })
}
