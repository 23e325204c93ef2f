//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "PFNT"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name utf-8 bytes,
//!          dtype    u8  (1 = f64),
//!          ndim     u32, dims ndim × u64,
//!          payload  prod(dims) × f64, row-major
//! ```
//!
//! Entries keep their insertion order, so equal archives encode to equal bytes.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type NamedTensors = Vec<(String, Tensor)>;

const MAGIC: &[u8; 4] = b"PFNT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn encode(entries: &NamedTensors) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated archive at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let dtype = c.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &NamedTensors) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn find<'a>(entries: &'a NamedTensors, name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
}

/// Hex SHA-256 of the encoded archive.
pub fn fingerprint(entries: &NamedTensors) -> String {
    let digest = Sha256::digest(encode(entries));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
