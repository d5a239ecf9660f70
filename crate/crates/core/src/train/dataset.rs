use super::TrainError;
use crate::autodiff::rng;
use crate::codec::image::Image;
use crate::codec::lossy::LossyBackend;
use crate::codec::{compute_residual, patch_residuals, patch_samples, PatchGrid, PatchRect};
use crate::model::PatchInput;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::{Path, PathBuf};

/// An image with its lossy reconstruction and residual.
#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub original: Image,
    pub lossy: Image,
    residual: Vec<i32>,
}

impl Entry {
    pub fn new(name: String, original: Image, backend: &dyn LossyBackend) -> Result<Self, TrainError> {
        let (_, lossy) = backend.encode(&original)?;
        let residual = compute_residual(&original, &lossy)?;
        Ok(Entry {
            name,
            original,
            lossy,
            residual,
        })
    }

    /// Aligned lossy samples and coding-order residuals of `rect`.
    pub fn patch(&self, rect: &PatchRect) -> PatchInput {
        PatchInput {
            width: rect.width,
            height: rect.height,
            lossy: patch_samples(&self.lossy, rect),
            residuals: patch_residuals(&self.residual, self.original.width(), self.original.channels(), rect),
        }
    }
}

/// One crop: which image and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub image: usize,
    pub rect: PatchRect,
}

/// Training and validation images, split once by seed.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub patch: usize,
    train: Vec<Entry>,
    validation: Vec<Entry>,
    skipped: Vec<(String, String)>,
}

/// `*.ppm`, `*.pgm` and `*.pnm` files directly inside `dir`, sorted by name.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    let rd = std::fs::read_dir(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

impl PatchDataset {
    /// Splits `images` into training and validation sets. `split` is the
    /// validation fraction; at least one image always stays in training.
    pub fn from_images(
        images: Vec<(String, Image)>,
        backend: &dyn LossyBackend,
        patch: usize,
        channels: usize,
        split: f64,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if patch == 0 {
            return Err(TrainError::Config("patch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&split) {
            return Err(TrainError::Config(format!("validation split {split} is outside [0, 1)")));
        }
        let mut skipped = Vec::new();
        let mut entries = Vec::new();
        for (name, img) in images {
            if img.channels() != channels {
                skipped.push((name, format!("{} channels, model expects {channels}", img.channels())));
                continue;
            }
            entries.push(Entry::new(name, img, backend)?);
        }
        if entries.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut rng::seeded_stream(seed, u64::MAX));
        let n_val = ((entries.len() as f64 * split).round() as usize).min(entries.len() - 1);
        let val_set: Vec<usize> = order[..n_val].to_vec();
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for (i, e) in entries.into_iter().enumerate() {
            if val_set.contains(&i) {
                validation.push(e);
            } else {
                train.push(e);
            }
        }
        Ok(PatchDataset {
            patch,
            train,
            validation,
            skipped,
        })
    }

    /// Loads every image file in `dir`; unreadable files are recorded in
    /// [`PatchDataset::skipped`].
    pub fn from_dir(
        dir: &Path,
        backend: &dyn LossyBackend,
        patch: usize,
        channels: usize,
        split: f64,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut images = Vec::new();
        let mut unreadable = Vec::new();
        for path in corpus_files(dir)? {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            match Image::read(&path) {
                Ok(img) => images.push((name, img)),
                Err(e) => unreadable.push((name, e.to_string())),
            }
        }
        let mut ds = Self::from_images(images, backend, patch, channels, split, seed)?;
        unreadable.append(&mut ds.skipped);
        ds.skipped = unreadable;
        Ok(ds)
    }

    pub fn train_images(&self) -> &[Entry] {
        &self.train
    }

    pub fn validation_images(&self) -> &[Entry] {
        &self.validation
    }

    /// Files left out, with the reason.
    pub fn skipped(&self) -> &[(String, String)] {
        &self.skipped
    }

    /// A uniformly placed crop of up to `patch x patch` from a uniformly
    /// chosen training image.
    pub fn sample_crop(&self, r: &mut impl Rng) -> Crop {
        let image = r.random_range(0..self.train.len());
        let img = &self.train[image].original;
        let (w, h) = (self.patch.min(img.width()), self.patch.min(img.height()));
        let x = r.random_range(0..=img.width() - w);
        let y = r.random_range(0..=img.height() - h);
        Crop {
            image,
            rect: PatchRect {
                x,
                y,
                width: w,
                height: h,
            },
        }
    }

    pub fn crop_input(&self, crop: &Crop) -> (&Image, PatchInput) {
        let e = &self.train[crop.image];
        (&e.lossy, e.patch(&crop.rect))
    }

    /// Every grid patch of every validation image.
    pub fn validation_patches(&self) -> Vec<(&Image, PatchInput)> {
        self.validation
            .iter()
            .flat_map(|e| {
                PatchGrid::new(e.original.width(), e.original.height(), self.patch)
                    .rects
                    .into_iter()
                    .map(move |rect| (&e.lossy, e.patch(&rect)))
            })
            .collect()
    }
}
