//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "CSTK"
//! version  u32      1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8 bytes)
//!   dtype    u8     0 = f32, 1 = f64
//!   rank     u32
//!   dims     u64 × rank
//!   payload  product(dims) little-endian elements
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CSTK";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads the dtype of the first tensor without decoding payloads.
pub fn peek_dtype(bytes: &[u8]) -> Result<Option<DType>> {
    let mut r = header(bytes)?;
    if r.1 == 0 {
        return Ok(None);
    }
    let name_len = r.0.u32()? as usize;
    r.0.take(name_len)?;
    let tag = r.0.take(1)?[0];
    DType::from_tag(tag)
        .map(Some)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))
}

fn header(bytes: &[u8]) -> Result<(Reader<'_>, u32)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    Ok((r, count))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let (mut r, count) = header(bytes)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("{name}: stored as {dtype}, requested {}", T::DTYPE)));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
        let size = dtype.size_of();
        let payload = r.take(numel.checked_mul(size).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        store.insert(name, Tensor::new(dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save<T: Element>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    decode(&fs::read(path)?)
}
