//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "CPUN" | u32 version | u64 config text length | config text (utf-8)
//!   | u32 param count | per parameter:
//!       u32 name length | name | u32 rank | rank x u64 dims | f64 values
//!
//! Values are written verbatim as IEEE-754 bits, so a save/load round trip
//! is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{CpError, Result};
use crate::tensor::{numel, ParamStore};

pub const MAGIC: &[u8; 4] = b"CPUN";
pub const VERSION: u32 = 1;

pub fn save(path: &Path, config_text: &str, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| CpError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CpError::Data(format!(
                "{}: truncated checkpoint at byte {}",
                self.path.display(),
                self.pos
            )));
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
}

pub fn load(path: &Path) -> Result<(String, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| CpError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(CpError::Data(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CpError::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let cfg_len = r.u64()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| CpError::Data(format!("{}: config text is not utf-8", path.display())))?;

    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CpError::Data(format!("{}: parameter name not utf-8", path.display())))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = numel(&shape);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        store.add(&name, shape, values)?;
    }
    if r.pos != bytes.len() {
        return Err(CpError::Data(format!(
            "{}: {} trailing bytes after checkpoint data",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok((config_text, store))
}
