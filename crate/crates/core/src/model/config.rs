use super::ModelError;
use serde::{Deserialize, Serialize};

/// Pixel values per channel for the local embedding table.
pub const LOCAL_VOCAB: usize = 256;
/// Residual embedding rows: 511 residual symbols plus the start token.
pub const RESIDUAL_VOCAB: usize = 512;
pub const START_TOKEN: usize = 511;
/// Channel widths of the convolution stack before the final `d`.
pub const CONV_CHANNELS: [usize; 3] = [16, 32, 64];
/// Lossy images are edge-padded to at least this side before the convolutions.
pub const MIN_GLOBAL_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Mixture components per subpixel.
    pub mixtures: usize,
    pub patch: usize,
    pub global_tokens: usize,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            layers: 4,
            heads: 4,
            mixtures: 5,
            patch: 16,
            global_tokens: 16,
            channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.mixtures == 0 || self.mixtures > 255 {
            return bad("mixture count must be in 1..=255");
        }
        if self.patch == 0 || self.patch > 256 {
            return bad("patch side must be in 1..=256");
        }
        if self.global_tokens == 0 || self.global_tokens > 256 {
            return bad("global token count must be in 1..=256");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        Ok(())
    }

    /// Pooling grid `(rows, cols)` with `rows * cols == global_tokens`.
    pub fn global_grid(&self) -> (usize, usize) {
        let k = self.global_tokens;
        let mut a = (k as f64).sqrt() as usize;
        while a > 1 && !k.is_multiple_of(a) {
            a -= 1;
        }
        (a.max(1), k / a.max(1))
    }

    pub fn subpixels_per_patch(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Rows of the positional table: global, local, then one per residual slot.
    pub fn position_slots(&self) -> usize {
        self.global_tokens + self.patch * self.patch + self.subpixels_per_patch()
    }

    pub fn local_slot(&self, y: usize, x: usize) -> usize {
        self.global_tokens + y * self.patch + x
    }

    pub fn residual_slot(&self, c: usize, y: usize, x: usize) -> usize {
        self.global_tokens + self.patch * self.patch + (c * self.patch + y) * self.patch + x
    }
}
