//! Named-parameter archive.
//!
//! Layout (little-endian):
//! ```text
//! magic     8 bytes  "PCNPARAM"
//! version   u32      1
//! meta_len  u32, then meta_len bytes of UTF-8 text (model config)
//! count     u32
//! count x { name_len u32, name bytes, rank u32, rank x u32 dims, f32 payload }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{ParamStore, Scalar, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"PCNPARAM";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn encode_archive<T: Scalar>(store: &ParamStore<T>, meta: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.element_count() * 4);
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id);
        let v = store.value(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(v.rank() as u32).to_le_bytes());
        for &d in v.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in v.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_archive<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a truncated archive behind
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_archive(store, meta)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, msg)
    }
}

pub fn decode_archive(path: &Path, buf: &[u8]) -> Result<(ParamStore<f32>, String)> {
    let mut r = Reader { path, buf, pos: 0 };
    if r.take(8, "magic")? != ARCHIVE_MAGIC {
        return Err(Error::format(path, 0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::format(path, 8, format!("unsupported archive version {version}")));
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "meta")?)
        .map_err(|_| r.fail("meta is not UTF-8"))?
        .to_string();
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.fail("name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > super::tensor::MAX_RANK {
            return Err(r.fail(format!("bad rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = r.take(len * 4, "payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let at = r.pos as u64;
        store
            .add(name, Tensor::new(&shape, data)?, true)
            .map_err(|e| Error::format(path, at, e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok((store, meta))
}

pub fn read_archive(path: &Path) -> Result<(ParamStore<f32>, String)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(path, &buf)
}
