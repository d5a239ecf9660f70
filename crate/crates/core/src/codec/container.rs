//! Byte layout of a coded image (all integers little-endian):
//!
//! ```text
//! "RESC" | u16 version | u8 flags | u32 H | u32 W | u8 C | u16 p | u8 K
//! | u64 model hash | u16 len + backend id | u32 len + lossy payload
//! | u32 N | N x u32 stream length | streams | [u64 image checksum]
//! ```
//!
//! The checksum is present when flag bit 0 is set.

use super::CodecError;

pub const MAGIC: &[u8; 4] = b"RESC";
pub const VERSION: u16 = 1;
pub const FLAG_CHECKSUM: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub patch: u16,
    pub mixtures: u8,
    pub model_hash: u64,
    pub backend: String,
    pub payload: Vec<u8>,
    pub streams: Vec<Vec<u8>>,
    pub checksum: Option<u64>,
}

impl Container {
    pub fn flags(&self) -> u8 {
        if self.checksum.is_some() {
            FLAG_CHECKSUM
        } else {
            0
        }
    }

    pub fn expected_patches(width: u32, height: u32, patch: u16) -> u64 {
        (width as u64).div_ceil(patch as u64) * (height as u64).div_ceil(patch as u64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body: usize = self.payload.len() + self.streams.iter().map(Vec::len).sum::<usize>();
        let mut b = Vec::with_capacity(64 + self.backend.len() + 4 * self.streams.len() + body);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.flags());
        b.extend_from_slice(&self.height.to_le_bytes());
        b.extend_from_slice(&self.width.to_le_bytes());
        b.push(self.channels);
        b.extend_from_slice(&self.patch.to_le_bytes());
        b.push(self.mixtures);
        b.extend_from_slice(&self.model_hash.to_le_bytes());
        b.extend_from_slice(&(self.backend.len() as u16).to_le_bytes());
        b.extend_from_slice(self.backend.as_bytes());
        b.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        b.extend_from_slice(&self.payload);
        b.extend_from_slice(&(self.streams.len() as u32).to_le_bytes());
        for s in &self.streams {
            b.extend_from_slice(&(s.len() as u32).to_le_bytes());
        }
        for s in &self.streams {
            b.extend_from_slice(s);
        }
        if let Some(c) = self.checksum {
            b.extend_from_slice(&c.to_le_bytes());
        }
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let flags = r.u8()?;
        if flags & !FLAG_CHECKSUM != 0 {
            return Err(bad(&format!("unknown flags {flags:#04x}")));
        }
        let height = r.u32()?;
        let width = r.u32()?;
        let channels = r.u8()?;
        let patch = r.u16()?;
        let mixtures = r.u8()?;
        if width == 0 || height == 0 {
            return Err(bad("zero image dimension"));
        }
        if channels != 1 && channels != 3 {
            return Err(bad(&format!("{channels} channels")));
        }
        if patch == 0 {
            return Err(bad("zero patch size"));
        }
        let model_hash = r.u64()?;
        let id_len = r.u16()? as usize;
        let backend = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| bad("backend id is not UTF-8"))?;
        let payload_len = r.u32()? as usize;
        let payload = r.take(payload_len)?.to_vec();
        let n = r.u32()? as u64;
        let expected = Self::expected_patches(width, height, patch);
        if n != expected {
            return Err(bad(&format!("{n} patches declared, image needs {expected}")));
        }
        if n * 4 > (bytes.len() - r.pos) as u64 {
            return Err(bad("truncated stream table"));
        }
        let mut lens = Vec::with_capacity(n as usize);
        for _ in 0..n {
            lens.push(r.u32()? as usize);
        }
        let mut streams = Vec::with_capacity(lens.len());
        for len in lens {
            streams.push(r.take(len)?.to_vec());
        }
        let checksum = if flags & FLAG_CHECKSUM != 0 { Some(r.u64()?) } else { None };
        if r.pos != bytes.len() {
            return Err(bad(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container {
            width,
            height,
            channels,
            patch,
            mixtures,
            model_hash,
            backend,
            payload,
            streams,
            checksum,
        })
    }

    pub fn total_bytes(&self) -> usize {
        self.to_bytes().len()
    }

    /// Size split in the style of a lossy/residual ablation table.
    pub fn bpsp(&self) -> super::pipeline::BpspReport {
        let residual: usize = self.streams.iter().map(Vec::len).sum();
        let total = self.total_bytes();
        super::pipeline::BpspReport {
            subpixels: self.width as u64 * self.height as u64 * self.channels as u64,
            total_bytes: total as u64,
            lossy_bytes: self.payload.len() as u64,
            residual_bytes: residual as u64,
        }
    }
}

fn bad(m: &str) -> CodecError {
    CodecError::Container(m.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(&format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
