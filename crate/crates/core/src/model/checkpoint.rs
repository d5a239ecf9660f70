use super::config::ModelConfig;
use super::layout::{self, Init, Layout};
use super::ModelError;
use crate::autodiff::{rng, Tensor};
use crate::hash::hash64;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;

/// Model configuration, named parameters and training metadata.
///
/// Parameters are held as `f64` but always carry values representable in
/// `f32`, the storage precision, so save/load is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// Fresh parameters: truncated-normal weights, zero biases, unit gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (entries, _) = layout::build(&config);
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let mut r = rng::seeded_stream(seed, i as u64);
            let n: usize = e.shape.iter().product();
            let data = match e.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal => (0..n)
                    .map(|_| rng::truncated_normal(&mut r, INIT_STD) as f32 as f64)
                    .collect(),
            };
            tensors.push(Tensor::new(e.shape, data)?);
            names.push(e.name);
        }
        Ok(Checkpoint {
            config,
            seed,
            step: 0,
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces parameter values, rounding them to storage precision.
    pub fn set_values(&mut self, values: &[Vec<f64>]) -> Result<(), ModelError> {
        if values.len() != self.tensors.len() {
            return Err(ModelError::Format(format!(
                "{} value arrays for {} parameters",
                values.len(),
                self.tensors.len()
            )));
        }
        for ((t, v), name) in self.tensors.iter().zip(values).zip(&self.names) {
            if t.len() != v.len() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    actual: vec![v.len()],
                });
            }
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            for (dst, &src) in t.data_mut().iter_mut().zip(v) {
                *dst = src as f32 as f64;
            }
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Layout {
        layout::build(&self.config).1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 4 * self.parameter_count());
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.d, c.layers, c.heads, c.mixtures, c.patch, c.global_tokens, c.channels] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.shape().len() as u8);
            for &dim in t.shape() {
                b.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let h = hash64(&b);
        b.extend_from_slice(&h.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let mut r = Reader { bytes, pos: 5 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(version));
        }
        if bytes.len() < 8 + 9 {
            return Err(ModelError::Format("truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if hash64(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(ModelError::Checksum);
        }
        let mut r = Reader { bytes: body, pos: 9 };
        let mut dims = [0usize; 7];
        for v in dims.iter_mut() {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            d: dims[0],
            layers: dims[1],
            heads: dims[2],
            mixtures: dims[3],
            patch: dims[4],
            global_tokens: dims[5],
            channels: dims[6],
        };
        config.validate()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut found: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| ModelError::Format("parameter name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| ModelError::Format(format!("parameter {name} is too large")))?;
            let raw = r.take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            found.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(ModelError::Format("trailing bytes before checksum".into()));
        }
        let (entries, _) = layout::build(&config);
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let idx = found
                .iter()
                .position(|(n, _)| *n == e.name)
                .ok_or_else(|| ModelError::MissingParam(e.name.clone()))?;
            let (name, t) = found.swap_remove(idx);
            if t.shape() != e.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: e.shape,
                    actual: t.shape().to_vec(),
                });
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some((name, _)) = found.first() {
            return Err(ModelError::Format(format!("unexpected parameter {name}")));
        }
        Ok(Checkpoint {
            config,
            seed,
            step,
            names,
            tensors,
        })
    }

    /// Content hash of the serialized checkpoint.
    pub fn fingerprint(&self) -> u64 {
        hash64(&self.to_bytes())
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
