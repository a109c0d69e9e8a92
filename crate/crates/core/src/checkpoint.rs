//! Checkpoint container.
//!
//! ```text
//! "FCCK"  u32 version
//! u32 mode_len, mode (UTF-8)
//! u32 entry_count
//! entry: u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dims, prod(dims) x f32
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Mode, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FCCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, params.mode().as_str());
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.entries() {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], file: &Path) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(4)? != MAGIC {
        return Err(Error::format(file, "bad magic, expected FCCK"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            file,
            format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let mode: Mode = r.string()?.parse().map_err(|e: Error| Error::format(file, e.to_string()))?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::format(file, format!("tensor {name} has {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format(file, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(file, "trailing bytes after last entry"));
    }
    ModelParams::from_entries(mode, entries).map_err(|e| Error::format(file, e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.file, "truncated file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.file, "name is not UTF-8"))
    }
}
