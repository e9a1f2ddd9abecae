//! `VPSW` weight container: a little-endian tensor table followed by a raw
//! payload.
//!
//! ```text
//! magic      4 bytes  "VPSW"
//! version    u16
//! count      u32
//! entries    count x { name_len u16, name utf-8, dtype u8 (0 = i8, 1 = f32),
//!                      ndim u8, dims ndim x u32, scale f64, zero_point i32,
//!                      offset u64 (relative to payload start) }
//! payload    u64 length, then bytes
//! ```

use std::path::Path;

use thiserror::Error;

use crate::quant::{QuantError, QuantTensor};

pub const MAGIC: &[u8; 4] = b"VPSW";
pub const VERSION: u16 = 1;

const DTYPE_I8: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown dtype tag {tag} for tensor '{name}'")]
    UnknownDtype { name: String, tag: u8 },
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("invalid tensor '{name}': {source}")]
    Tensor { name: String, source: QuantError },
    #[error("embedded config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ContainerError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            ContainerError::CorruptHeader(_) => 10,
            ContainerError::ShapeMismatch(_) => 11,
            ContainerError::UnknownDtype { .. } => 12,
            ContainerError::MissingTensor(_) => 13,
            ContainerError::Tensor { .. } => 14,
            ContainerError::Config(_) => 15,
            ContainerError::Io(_) => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    I8(QuantTensor),
    F32 {
        shape: Vec<usize>,
        data: Vec<f32>,
        scale: f64,
        zero_point: i32,
    },
}

impl TensorPayload {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        TensorPayload::F32 {
            shape,
            data,
            scale: 1.0,
            zero_point: 0,
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorPayload::I8(t) => t.len(),
            TensorPayload::F32 { data, .. } => data.len() * 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub payload: TensorPayload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightContainer {
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                ContainerError::CorruptHeader(format!("truncated while reading {what}"))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32, ContainerError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    scale: f64,
    zero_point: i32,
    offset: u64,
}

impl WeightContainer {
    pub fn push(&mut self, name: impl Into<String>, payload: TensorPayload) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            payload,
        });
    }

    pub fn get(&self, name: &str) -> Option<&TensorPayload> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.payload)
    }

    pub fn quant(&self, name: &str) -> Result<&QuantTensor, ContainerError> {
        match self.get(name) {
            Some(TensorPayload::I8(t)) => Ok(t),
            Some(_) => Err(ContainerError::ShapeMismatch(format!(
                "tensor '{name}' should be i8"
            ))),
            None => Err(ContainerError::MissingTensor(name.to_string())),
        }
    }

    pub fn f32_values(&self, name: &str) -> Result<(&[usize], &[f32]), ContainerError> {
        match self.get(name) {
            Some(TensorPayload::F32 { shape, data, .. }) => Ok((shape, data)),
            Some(_) => Err(ContainerError::ShapeMismatch(format!(
                "tensor '{name}' should be f32"
            ))),
            None => Err(ContainerError::MissingTensor(name.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let (dtype, shape, scale, zp) = match &t.payload {
                TensorPayload::I8(q) => (DTYPE_I8, q.shape(), q.scale(), q.zero_point()),
                TensorPayload::F32 {
                    shape,
                    scale,
                    zero_point,
                    ..
                } => (DTYPE_F32, shape.as_slice(), *scale, *zero_point),
            };
            out.push(dtype);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&scale.to_le_bytes());
            out.extend_from_slice(&zp.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.payload.byte_len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in &self.tensors {
            match &t.payload {
                TensorPayload::I8(q) => out.extend(q.data().iter().map(|&v| v as u8)),
                TensorPayload::F32 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(ContainerError::CorruptHeader("bad magic".into()));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(ContainerError::CorruptHeader(format!(
                "unsupported version {version}"
            )));
        }
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| ContainerError::CorruptHeader("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_I8 && dtype != DTYPE_F32 {
                return Err(ContainerError::UnknownDtype { name, tag: dtype });
            }
            let ndim = r.u8("ndim")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let scale = r.f64("scale")?;
            let zero_point = r.i32("zero point")?;
            let offset = r.u64("offset")?;
            entries.push(Entry {
                name,
                dtype,
                shape,
                scale,
                zero_point,
                offset,
            });
        }
        let declared = r.u64("payload length")? as usize;
        let payload = &buf[r.pos..];
        if payload.len() > declared {
            return Err(ContainerError::CorruptHeader(format!(
                "{} trailing bytes after payload",
                payload.len() - declared
            )));
        }

        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for e in &entries {
            let elems: usize = e.shape.iter().product();
            let width = if e.dtype == DTYPE_I8 { 1 } else { 4 };
            let start = e.offset as usize;
            let end = start + elems * width;
            if end > declared || end > payload.len() {
                return Err(ContainerError::ShapeMismatch(format!(
                    "tensor '{}' {:?} needs bytes {start}..{end} but payload holds {}",
                    e.name,
                    e.shape,
                    payload.len()
                )));
            }
            spans.push((start, end, &e.name));
            let bytes = &payload[start..end];
            let tensor = if e.dtype == DTYPE_I8 {
                let data = bytes.iter().map(|&b| b as i8).collect();
                TensorPayload::I8(
                    QuantTensor::new(e.shape.clone(), data, e.scale, e.zero_point).map_err(
                        |source| ContainerError::Tensor {
                            name: e.name.clone(),
                            source,
                        },
                    )?,
                )
            } else {
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                TensorPayload::F32 {
                    shape: e.shape.clone(),
                    data,
                    scale: e.scale,
                    zero_point: e.zero_point,
                }
            };
            tensors.push(NamedTensor {
                name: e.name.clone(),
                payload: tensor,
            });
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(ContainerError::CorruptHeader(format!(
                    "tensors '{}' and '{}' overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
