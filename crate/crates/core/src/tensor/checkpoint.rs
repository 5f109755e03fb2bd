//! Named-array checkpoint files.
//!
//! Layout (little-endian): magic `CFTS`, format version `u32`, element width
//! in bytes `u32` (4 or 8), array count `u32`; then per array: name length
//! `u32`, UTF-8 name, rank `u32`, `rank` extents as `u64`, raw floats.

use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFTS";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(arrays: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.reserve(t.len() * T::BYTES);
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                field,
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(buf: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: "expected CFTS".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let width = r.u32("element width")? as usize;
    if width != T::BYTES {
        return Err(Error::Format {
            field: "element width",
            detail: format!("file stores {width}-byte floats, reader expects {}", T::NAME),
        });
    }
    let count = r.u32("count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|e| Error::Format {
                field: "name",
                detail: e.to_string(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * width, "data")?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, arrays: &[(String, &Tensor<T>)]) -> Result<()> {
    fs::write(path, encode(arrays)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
