//! `HWCK1` checkpoint files: little-endian named arrays.
//!
//! Layout: magic `HWCK1`, `u32` entry count, then per entry `u32` name length,
//! UTF-8 name, `u32` rank, `rank` x `u64` dims, `f64` data row-major.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"HWCK1";
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

pub fn encode_entries<'a, I>(entries: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Byte reader that reports the offset of any failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, reason: reason.into() })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.remaining()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        if n.checked_mul(8).map_or(true, |b| b > self.remaining()) {
            return self.fail(format!("truncated {what}: {n} values announced, {} bytes left", self.remaining()));
        }
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, reason: "bad magic, not an HWCK1 checkpoint".into() });
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32("name length")? as usize;
        if len > MAX_NAME {
            return Err(Error::Format { offset: at as u64, reason: format!("name length {len} too large") });
        }
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => return Err(Error::Format { offset: at as u64 + 4, reason: "name is not UTF-8".into() }),
        };
        let at = r.offset();
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format { offset: at as u64, reason: format!("rank {rank} too large") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n else { return r.fail(format!("dimensions {shape:?} overflow")) };
        let data = r.f64s(n, &format!("data of {name}"))?;
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes", r.remaining()));
    }
    Ok(out)
}

pub fn save_entries<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    crate::io::write_atomic(path, &encode_entries(entries))
}

pub fn load_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_entries(&std::fs::read(path)?)
}
