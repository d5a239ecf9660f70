use super::TrainError;
use crate::codec::image::Image;
use crate::codec::lossy::LossyBackend;
use crate::codec::models::ResidualModel;
use crate::codec::pipeline::{encode, EncodeOptions};
use crate::codec::{compute_residual, patch_residuals, patch_samples, PatchGrid};
use crate::model::{patch_loss, register_params, Checkpoint, PatchInput};
use crate::autodiff::Tape;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub name: String,
    pub subpixels: u64,
    pub lossy: f64,
    pub residual: f64,
    /// Whole container, header included.
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Images that could not be read or coded, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_lossy(&self) -> f64 {
        self.mean(|r| r.lossy)
    }

    pub fn mean_residual(&self) -> f64 {
        self.mean(|r| r.residual)
    }

    pub fn mean_total(&self) -> f64 {
        self.mean(|r| r.total)
    }

    /// Plain-text table of per-image bpsp with a mean row.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).chain([5]).max().unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}  {:>8}", "image", "lossy", "residual", "total");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}", r.name, r.lossy, r.residual, r.total);
        }
        if !self.rows.is_empty() {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
                "mean",
                self.mean_lossy(),
                self.mean_residual(),
                self.mean_total()
            );
        }
        for (name, why) in &self.skipped {
            let _ = writeln!(s, "skipped {name}: {why}");
        }
        s
    }
}

fn row(name: &str, img: &Image, backend: &dyn LossyBackend, model: &dyn ResidualModel, workers: usize) -> Result<EvalRow, String> {
    let opts = EncodeOptions { workers, checksum: true };
    let c = encode(img, backend, model, &opts).map_err(|e| e.to_string())?;
    let b = c.bpsp();
    Ok(EvalRow {
        name: name.to_string(),
        subpixels: b.subpixels,
        lossy: b.lossy(),
        residual: b.residual(),
        total: b.total(),
    })
}

/// Encodes every image and reports its bpsp split.
pub fn evaluate(model: &dyn ResidualModel, backend: &dyn LossyBackend, images: &[(String, Image)], workers: usize) -> EvalReport {
    let mut rep = EvalReport::default();
    for (name, img) in images {
        match row(name, img, backend, model, workers) {
            Ok(r) => rep.rows.push(r),
            Err(e) => rep.skipped.push((name.clone(), e)),
        }
    }
    rep
}

/// As [`evaluate`], reading each file first. Unreadable files are skipped.
pub fn evaluate_files(model: &dyn ResidualModel, backend: &dyn LossyBackend, paths: &[PathBuf], workers: usize) -> EvalReport {
    let mut rep = EvalReport::default();
    for path in paths {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        let result = Image::read(path)
            .map_err(|e| e.to_string())
            .and_then(|img| row(&name, &img, backend, model, workers));
        match result {
            Ok(r) => rep.rows.push(r),
            Err(e) => rep.skipped.push((name, e)),
        }
    }
    rep
}

/// Model NLL of the whole image's residual in bits per subpixel, patch by
/// patch on the coding grid, in 64-bit precision.
pub fn image_nll_bits(ckpt: &Checkpoint, original: &Image, lossy: &Image) -> Result<f64, TrainError> {
    let residual = compute_residual(original, lossy)?;
    let (w, c) = (original.width(), original.channels());
    let mut nats = 0.0;
    for rect in PatchGrid::new(w, original.height(), ckpt.config.patch).rects {
        let p = PatchInput {
            width: rect.width,
            height: rect.height,
            lossy: patch_samples(lossy, &rect),
            residuals: patch_residuals(&residual, w, c, &rect),
        };
        let mut tape = Tape::inference();
        let vars = register_params(&mut tape, ckpt);
        let l = patch_loss(&mut tape, &vars, ckpt, lossy, &p)?;
        nats += tape.value(l).item();
    }
    Ok(nats / std::f64::consts::LN_2 / original.subpixels() as f64)
}
