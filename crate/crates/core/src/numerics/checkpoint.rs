//! Flat binary tensor checkpoints.
//!
//! Layout: `b"KSTT"`, `u32` format version, then one record per tensor until
//! end of file: `u32` name length, UTF-8 name, `u32` rank, `u64` per extent,
//! and the payload as little-endian `f64`. All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{KsttError, Result};

pub const MAGIC: &[u8; 4] = b"KSTT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + store.total_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            KsttError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(KsttError::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(KsttError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| KsttError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| KsttError::Checkpoint(format!("tensor {name:?}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| KsttError::io(path, e))?;
    f.write_all(&encode(store))
        .map_err(|e| KsttError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| KsttError::io(path, e))?;
    decode(&bytes)
}
