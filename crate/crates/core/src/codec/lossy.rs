//! Lossy base-layer codecs.
//!
//! A backend's reconstruction must be a pure function of its payload: the
//! decoder only ever sees the payload, and the residual is taken against
//! whatever the encoder reconstructed.

use super::image::Image;
use super::CodecError;
use std::path::{Path, PathBuf};
use std::process::Command;

pub trait LossyBackend: Send + Sync {
    /// Name recorded in the container.
    fn id(&self) -> String;
    /// Returns the payload and the reconstruction the decoder will see.
    fn encode(&self, img: &Image) -> Result<(Vec<u8>, Image), CodecError>;
    fn decode(&self, payload: &[u8], width: usize, height: usize, channels: usize) -> Result<Image, CodecError>;
}

/// Stores raw samples; the residual is all zeros.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackend;

impl LossyBackend for IdentityBackend {
    fn id(&self) -> String {
        "identity".into()
    }

    fn encode(&self, img: &Image) -> Result<(Vec<u8>, Image), CodecError> {
        Ok((img.data().to_vec(), img.clone()))
    }

    fn decode(&self, payload: &[u8], width: usize, height: usize, channels: usize) -> Result<Image, CodecError> {
        Image::new(width, height, channels, payload.to_vec()).map_err(|e| backend_err(&self.id(), e))
    }
}

/// Box downsampling by `s`, stored raw, with fixed-point bilinear upsampling.
#[derive(Debug, Clone, Copy)]
pub struct QdownBackend {
    factor: usize,
}

impl QdownBackend {
    pub const FACTORS: [usize; 3] = [2, 4, 8];

    pub fn new(factor: usize) -> Result<Self, CodecError> {
        if !Self::FACTORS.contains(&factor) {
            return Err(CodecError::Backend {
                backend: format!("qdown:{factor}"),
                reason: "factor must be 2, 4 or 8".into(),
            });
        }
        Ok(QdownBackend { factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Block means, rounded half up; edge blocks average only real pixels.
    pub fn downsample(&self, img: &Image) -> Vec<u8> {
        let s = self.factor;
        let (w, h, c) = (img.width(), img.height(), img.channels());
        let (dw, dh) = (w.div_ceil(s), h.div_ceil(s));
        let mut out = Vec::with_capacity(dw * dh * c);
        for by in 0..dh {
            for bx in 0..dw {
                let (y0, y1) = (by * s, ((by + 1) * s).min(h));
                let (x0, x1) = (bx * s, ((bx + 1) * s).min(w));
                let count = ((y1 - y0) * (x1 - x0)) as u32;
                for ch in 0..c {
                    let mut sum = 0u32;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += img.get(x, y, ch) as u32;
                        }
                    }
                    out.push(((sum + count / 2) / count) as u8);
                }
            }
        }
        out
    }

    /// Bilinear interpolation at pixel centres in units of `1/(2s)`.
    pub fn upsample(&self, small: &[u8], width: usize, height: usize, channels: usize) -> Vec<u8> {
        let s = self.factor as i64;
        let (dw, dh) = (width.div_ceil(self.factor), height.div_ceil(self.factor));
        let taps = |o: usize, n: usize| -> (usize, usize, i64) {
            let t = 2 * o as i64 + 1 - s;
            let i0 = t.div_euclid(2 * s);
            let wgt = t - i0 * 2 * s;
            let clamp = |i: i64| i.clamp(0, n as i64 - 1) as usize;
            (clamp(i0), clamp(i0 + 1), wgt)
        };
        let at = |x: usize, y: usize, ch: usize| small[(y * dw + x) * channels + ch] as i64;
        let one = 2 * s;
        let mut out = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            let (ya, yb, wy) = taps(y, dh);
            for x in 0..width {
                let (xa, xb, wx) = taps(x, dw);
                for ch in 0..channels {
                    let acc = (one - wy) * (one - wx) * at(xa, ya, ch)
                        + (one - wy) * wx * at(xb, ya, ch)
                        + wy * (one - wx) * at(xa, yb, ch)
                        + wy * wx * at(xb, yb, ch);
                    out.push(((acc + 2 * s * s) / (4 * s * s)).clamp(0, 255) as u8);
                }
            }
        }
        out
    }
}

impl LossyBackend for QdownBackend {
    fn id(&self) -> String {
        format!("qdown:{}", self.factor)
    }

    fn encode(&self, img: &Image) -> Result<(Vec<u8>, Image), CodecError> {
        let payload = self.downsample(img);
        let recon = self.decode(&payload, img.width(), img.height(), img.channels())?;
        Ok((payload, recon))
    }

    fn decode(&self, payload: &[u8], width: usize, height: usize, channels: usize) -> Result<Image, CodecError> {
        let expected = width.div_ceil(self.factor) * height.div_ceil(self.factor) * channels;
        if payload.len() != expected {
            return Err(CodecError::Backend {
                backend: self.id(),
                reason: format!("payload of {} bytes, expected {expected}", payload.len()),
            });
        }
        let data = self.upsample(payload, width, height, channels);
        Image::new(width, height, channels, data).map_err(|e| backend_err(&self.id(), e))
    }
}

/// Wraps external encode/decode commands run through `sh -c`.
///
/// Templates substitute `{in}` and `{out}` with quoted file paths. The
/// encoder reads a PPM/PGM and writes the payload; the decoder reads the
/// payload and writes a PPM/PGM of the same dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalBackend {
    pub name: String,
    pub encode_cmd: String,
    pub decode_cmd: String,
}

impl ExternalBackend {
    pub fn new(name: &str, encode_cmd: &str, decode_cmd: &str) -> Result<Self, CodecError> {
        let b = ExternalBackend {
            name: name.to_string(),
            encode_cmd: encode_cmd.to_string(),
            decode_cmd: decode_cmd.to_string(),
        };
        let bad = |reason: String| CodecError::Backend {
            backend: format!("external:{name}"),
            reason,
        };
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(bad("name must be non-empty without whitespace".into()));
        }
        for (k, t) in [("encode", encode_cmd), ("decode", decode_cmd)] {
            if !t.contains("{in}") || !t.contains("{out}") {
                return Err(bad(format!("{k} template needs {{in}} and {{out}}")));
            }
        }
        Ok(b)
    }

    /// Parses `key = value` lines (`name`, `encode`, `decode`); `#` starts a
    /// comment line.
    pub fn from_config(text: &str) -> Result<Self, CodecError> {
        let (mut name, mut enc, mut dec) = (None, None, None);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CodecError::Backend {
                backend: "external".into(),
                reason: format!("line {}: expected key = value", n + 1),
            })?;
            let slot = match k.trim() {
                "name" => &mut name,
                "encode" => &mut enc,
                "decode" => &mut dec,
                other => {
                    return Err(CodecError::Backend {
                        backend: "external".into(),
                        reason: format!("line {}: unknown key {other:?}", n + 1),
                    })
                }
            };
            *slot = Some(v.trim().to_string());
        }
        let need = |v: Option<String>, k: &str| {
            v.ok_or_else(|| CodecError::Backend {
                backend: "external".into(),
                reason: format!("missing key {k:?}"),
            })
        };
        Self::new(&need(name, "name")?, &need(enc, "encode")?, &need(dec, "decode")?)
    }

    pub fn from_config_file(path: &Path) -> Result<Self, CodecError> {
        let text = std::fs::read_to_string(path).map_err(|e| CodecError::Io(format!("{}: {e}", path.display())))?;
        Self::from_config(&text)
    }

    fn run(&self, template: &str, input: &Path, output: &Path) -> Result<(), CodecError> {
        let cmd = template
            .replace("{in}", &shell_quote(input))
            .replace("{out}", &shell_quote(output));
        let out = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| self.err(format!("cannot run sh: {e}")))?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            return Err(self.err(format!("`{cmd}` failed ({}): {}", out.status, stderr.trim())));
        }
        Ok(())
    }

    fn err(&self, reason: String) -> CodecError {
        CodecError::Backend {
            backend: self.id(),
            reason,
        }
    }

    fn scratch(&self) -> Result<(tempfile::TempDir, PathBuf), CodecError> {
        let dir = tempfile::tempdir().map_err(|e| self.err(format!("temp dir: {e}")))?;
        let path = dir.path().to_path_buf();
        Ok((dir, path))
    }
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

fn backend_err(id: &str, e: CodecError) -> CodecError {
    CodecError::Backend {
        backend: id.to_string(),
        reason: e.to_string(),
    }
}

fn pnm_ext(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

impl LossyBackend for ExternalBackend {
    fn id(&self) -> String {
        format!("external:{}", self.name)
    }

    fn encode(&self, img: &Image) -> Result<(Vec<u8>, Image), CodecError> {
        let (_guard, dir) = self.scratch()?;
        let input = dir.join(format!("input.{}", pnm_ext(img.channels())));
        let payload_path = dir.join("payload.bin");
        std::fs::write(&input, img.to_pnm()).map_err(|e| self.err(e.to_string()))?;
        self.run(&self.encode_cmd, &input, &payload_path)?;
        let payload = std::fs::read(&payload_path).map_err(|e| self.err(format!("no payload written: {e}")))?;
        let recon = self.decode(&payload, img.width(), img.height(), img.channels())?;
        Ok((payload, recon))
    }

    fn decode(&self, payload: &[u8], width: usize, height: usize, channels: usize) -> Result<Image, CodecError> {
        let (_guard, dir) = self.scratch()?;
        let payload_path = dir.join("payload.bin");
        let output = dir.join(format!("recon.{}", pnm_ext(channels)));
        std::fs::write(&payload_path, payload).map_err(|e| self.err(e.to_string()))?;
        self.run(&self.decode_cmd, &payload_path, &output)?;
        let recon = Image::read(&output).map_err(|e| self.err(format!("reconstruction: {e}")))?;
        if (recon.width(), recon.height(), recon.channels()) != (width, height, channels) {
            return Err(self.err(format!(
                "reconstruction is {}x{}x{}, expected {width}x{height}x{channels}",
                recon.width(),
                recon.height(),
                recon.channels()
            )));
        }
        Ok(recon)
    }
}

/// Builds a backend from `identity`, `qdown:S` (optionally prefixed by
/// `builtin:`) or `external:<config file>`.
pub fn backend_from_spec(spec: &str) -> Result<Box<dyn LossyBackend>, CodecError> {
    let s = spec.strip_prefix("builtin:").unwrap_or(spec);
    if s == "identity" {
        return Ok(Box::new(IdentityBackend));
    }
    if let Some(f) = s.strip_prefix("qdown:") {
        let factor = f.parse().map_err(|_| CodecError::Backend {
            backend: spec.into(),
            reason: "factor is not a number".into(),
        })?;
        return Ok(Box::new(QdownBackend::new(factor)?));
    }
    if let Some(path) = spec.strip_prefix("external:") {
        return Ok(Box::new(ExternalBackend::from_config_file(Path::new(path))?));
    }
    Err(CodecError::Backend {
        backend: spec.into(),
        reason: "unknown backend; use identity, qdown:2|4|8 or external:<config>".into(),
    })
}
