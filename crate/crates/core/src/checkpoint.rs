//! `IMOE` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IMOE" | version u32 | config_len u32 | config JSON (sorted keys)
//! | tensor_count u32 | tensors… | crc32 u32
//! tensor := name_len u32 | name utf-8 | dtype u8 | ndim u32 | dims u64… | data
//! ```
//!
//! The CRC covers every byte before it. The only dtype is `0` (f64).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IMOE";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = model.config.canonical_json();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.names().iter().zip(&model.params) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not an IMOE checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Integrity(format!("checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32("config length")? as usize;
    let json = r.take(n, "config")?;
    let config: ModelConfig =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("checkpoint config: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_owned();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Integrity(format!("tensor {name:?} has unknown dtype tag {dtype}")));
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = numel.and_then(|n| n.checked_mul(8));
        let raw = r.take(bytes_needed.ok_or_else(|| Error::Integrity(format!("tensor {name:?} is too large")))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("tensor {name:?}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes before the CRC", body.len() - r.pos)));
    }
    Model::from_named(&config, tensors)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let tmp = path.with_extension("imoe.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}
