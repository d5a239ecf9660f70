//! 8-bit images with interleaved channels, plus binary PPM/PGM I/O.

use super::CodecError;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, CodecError> {
        if width == 0 || height == 0 {
            return Err(CodecError::EmptyImage);
        }
        if channels != 1 && channels != 3 {
            return Err(CodecError::Image(format!("{channels} channels; only 1 or 3 supported")));
        }
        if width > u32::MAX as usize || height > u32::MAX as usize {
            return Err(CodecError::Image("dimensions exceed 32 bits".into()));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| CodecError::Image("image too large".into()))?;
        if data.len() != expected {
            return Err(CodecError::Image(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self, CodecError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn subpixels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copies a `w x h` window at `(x0, y0)`, interleaved like the source.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image, CodecError> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(CodecError::Image(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            out.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image::new(w, h, c, out)
    }

    /// Parses binary PPM (P6) or PGM (P5) with maxval 255.
    pub fn from_pnm(bytes: &[u8]) -> Result<Image, CodecError> {
        let bad = |m: &str| CodecError::Image(format!("PNM: {m}"));
        if bytes.len() < 2 || bytes[0] != b'P' {
            return Err(bad("missing magic"));
        }
        let channels = match bytes[1] {
            b'5' => 1,
            b'6' => 3,
            _ => return Err(bad("only P5 and P6 are supported")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in fields.iter_mut() {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos || pos - start > 10 {
                return Err(bad("malformed header field"));
            }
            *f = std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| bad("malformed header field"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("missing separator after maxval"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| bad("dimensions overflow"))?;
        let body = &bytes[pos..];
        if body.len() < n {
            return Err(bad("truncated pixel data"));
        }
        if body.len() > n {
            return Err(bad("trailing bytes after pixel data"));
        }
        Image::new(width, height, channels, body.to_vec())
    }

    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: &Path) -> Result<Image, CodecError> {
        let bytes = std::fs::read(path).map_err(|e| CodecError::Io(format!("{}: {e}", path.display())))?;
        Self::from_pnm(&bytes)
    }

    /// Writes via a temporary file in the target directory, then renames.
    pub fn write(&self, path: &Path) -> Result<(), CodecError> {
        write_atomic(path, &self.to_pnm())
    }
}

/// Writes `bytes` to `path` so that readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CodecError> {
    let io = |e: std::io::Error| CodecError::Io(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
