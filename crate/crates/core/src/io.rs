//! DKTENSOR binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "DKTENSOR"
//! version u8       1
//! dtype   u8       0 = f64, 1 = f32
//! rank    u16
//! dims    rank × u64
//! data    product(dims) scalars of the tagged dtype
//! ```
//!
//! f64 files round-trip bit-exactly. f32 is a storage option only: values
//! are rounded on write and widened exactly on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DKTENSOR";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let rank = u16::try_from(tensor.rank())
        .map_err(|_| Error::Format(format!("rank {} does not fit in u16", tensor.rank())))?;
    let mut out = Vec::with_capacity(12 + 8 * tensor.rank() + dtype.width() * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.tag());
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => {
            for &v in tensor.data() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::Format(format!("{v} overflows f32 storage")));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Format("bad magic, not a DKTENSOR file".into()));
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_tag(cur.take(1)?[0])?;
    let rank = u16::from_le_bytes(cur.array()?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.array()?);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let payload = bytes.len() - cur.pos;
    let needed = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if payload < needed {
        return Err(Error::Format(format!("truncated payload: {payload} of {needed} bytes")));
    }
    if payload > needed {
        return Err(Error::Format(format!(
            "payload length mismatch: {payload} bytes for shape {shape:?}"
        )));
    }
    let data = match dtype {
        DType::F64 => (0..count).map(|_| cur.array().map(f64::from_le_bytes)).collect::<Result<_>>()?,
        DType::F32 => (0..count)
            .map(|_| cur.array().map(|b| f32::from_le_bytes(b) as f64))
            .collect::<Result<_>>()?,
    };
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    fs::write(path, encode(tensor, dtype)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Format(format!("truncated header at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }
}
