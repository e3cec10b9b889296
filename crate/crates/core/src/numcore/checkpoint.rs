//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MDATCKPT"
//! version      u32       = 1
//! layer_count  u32
//! per layer:
//!   name_len   u32, name (UTF-8)
//!   tensors    u32
//!   per tensor:
//!     name_len u32, name (UTF-8)
//!     ndim     u32, dims u64 x ndim
//!     values   f64 x prod(dims)     (IEEE-754 bit patterns)
//! extra_count  u64, extras u64 x extra_count
//! ```
//!
//! `extras` carries model-level integer metadata (the actor-token ids).
//! Trailing bytes after the extras block are rejected.

use super::{ParamSet, ParamTensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MDATCKPT";
pub const VERSION: u32 = 1;

pub fn serialize(params: &ParamSet, extras: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let reg = params.registry();
    out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for layer in 0..reg.len() {
        put_str(&mut out, reg.name(layer));
        out.extend_from_slice(&(reg.members(layer).len() as u32).to_le_bytes());
        for &t in reg.members(layer) {
            let tensor = params.tensor(t);
            put_str(&mut out, tensor.name());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.values() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(extras.len() as u64).to_le_bytes());
    for e in extras {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<(ParamSet, Vec<u64>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::persistence("bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::persistence(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let layers = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..layers {
        let name = r.string()?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tname = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::persistence("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::persistence("tensor size overflow"))?;
            if n > r.remaining() / 8 {
                return Err(Error::persistence(format!("truncated checkpoint inside tensor {tname}")));
            }
            let values = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            tensors.push(ParamTensor::from_values(tname, &shape, values).map_err(|e| Error::persistence(e.to_string()))?);
        }
        params.push_layer(name, tensors).map_err(|e| Error::persistence(e.to_string()))?;
    }
    let n_extra = r.u64()?;
    if n_extra > (r.remaining() / 8) as u64 {
        return Err(Error::persistence("truncated checkpoint extras"));
    }
    let extras = (0..n_extra).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::persistence(format!("{} trailing bytes after checkpoint", r.remaining())));
    }
    Ok((params, extras))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::persistence(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::persistence("layer name is not UTF-8"))
    }
}
