//! MRC2014 reader/writer restricted to mode 2 (32-bit float).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 1024;
const MODE_FLOAT32: i32 = 2;

/// Decoded map or image stack; `data` is x fastest, then y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcMap {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Ångström per voxel along x, y, z.
    pub voxel_size: [f32; 3],
    /// Image stack (space group 0, `MZ = 1`) rather than a volume.
    pub is_stack: bool,
    pub data: Vec<f32>,
}

fn put_i32(h: &mut [u8], off: usize, v: i32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], off: usize, v: f32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i32(h: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(h[off..off + 4].try_into().unwrap())
}

fn get_f32(h: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(h[off..off + 4].try_into().unwrap())
}

impl MrcMap {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.nx * self.ny * self.nz;
        if self.data.len() != n {
            return Err(Error::shape(
                "mrc",
                format!("{} values for {}x{}x{}", self.data.len(), self.nx, self.ny, self.nz),
            ));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "MRC data".into(),
                index: i,
            });
        }
        let mut h = vec![0u8; HEADER_LEN];
        put_i32(&mut h, 0, self.nx as i32);
        put_i32(&mut h, 4, self.ny as i32);
        put_i32(&mut h, 8, self.nz as i32);
        put_i32(&mut h, 12, MODE_FLOAT32);
        let mz = if self.is_stack { 1 } else { self.nz };
        put_i32(&mut h, 28, self.nx as i32);
        put_i32(&mut h, 32, self.ny as i32);
        put_i32(&mut h, 36, mz as i32);
        put_f32(&mut h, 40, self.voxel_size[0] * self.nx as f32);
        put_f32(&mut h, 44, self.voxel_size[1] * self.ny as f32);
        put_f32(&mut h, 48, self.voxel_size[2] * mz as f32);
        for off in [52, 56, 60] {
            put_f32(&mut h, off, 90.0);
        }
        put_i32(&mut h, 64, 1);
        put_i32(&mut h, 68, 2);
        put_i32(&mut h, 72, 3);
        let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v as f64;
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        let rms = if n > 0 {
            (self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        } else {
            0.0
        };
        put_f32(&mut h, 76, if n > 0 { lo } else { 0.0 });
        put_f32(&mut h, 80, if n > 0 { hi } else { 0.0 });
        put_f32(&mut h, 84, mean as f32);
        put_i32(&mut h, 88, if self.is_stack { 0 } else { 1 });
        put_i32(&mut h, 108, 20140);
        h[208..212].copy_from_slice(b"MAP ");
        h[212..216].copy_from_slice(&[0x44, 0x44, 0x00, 0x00]);
        put_f32(&mut h, 216, rms as f32);
        put_i32(&mut h, 220, 1);
        let label = b"cryoforge";
        h[224..224 + label.len()].copy_from_slice(label);

        let mut out = h;
        out.reserve(n * 4);
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<MrcMap> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Format {
                field: "header",
                detail: format!("file has {} bytes, header needs {HEADER_LEN}", buf.len()),
            });
        }
        if &buf[208..212] != b"MAP " {
            return Err(Error::Format {
                field: "MAP",
                detail: format!("bad map magic {:?}", &buf[208..212]),
            });
        }
        if buf[212] != 0x44 {
            return Err(Error::Format {
                field: "MACHST",
                detail: "only little-endian files are supported".into(),
            });
        }
        let mode = get_i32(buf, 12);
        if mode != MODE_FLOAT32 {
            return Err(Error::Format {
                field: "MODE",
                detail: format!("unsupported mode {mode}, only mode 2 (float32) is read"),
            });
        }
        let dims = [get_i32(buf, 0), get_i32(buf, 4), get_i32(buf, 8)];
        if dims.iter().any(|&d| d <= 0) {
            return Err(Error::Format {
                field: "NX/NY/NZ",
                detail: format!("non-positive extents {dims:?}"),
            });
        }
        let [nx, ny, nz] = dims.map(|d| d as usize);
        let m = [get_i32(buf, 28), get_i32(buf, 32), get_i32(buf, 36)];
        let cell = [get_f32(buf, 40), get_f32(buf, 44), get_f32(buf, 48)];
        let mut voxel_size = [1.0f32; 3];
        for a in 0..3 {
            if m[a] > 0 && cell[a] > 0.0 {
                voxel_size[a] = cell[a] / m[a] as f32;
            }
        }
        let nsymbt = get_i32(buf, 92).max(0) as usize;
        let start = HEADER_LEN + nsymbt;
        let n = nx * ny * nz;
        if buf.len() < start + n * 4 {
            return Err(Error::Format {
                field: "data",
                detail: format!("expected {} data bytes, found {}", n * 4, buf.len().saturating_sub(start)),
            });
        }
        let data = buf[start..start + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(MrcMap {
            nx,
            ny,
            nz,
            voxel_size,
            is_stack: get_i32(buf, 88) == 0,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<MrcMap> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(nz: usize, stack: bool) -> MrcMap {
        MrcMap {
            nx: 4,
            ny: 4,
            nz,
            voxel_size: [1.5; 3],
            is_stack: stack,
            data: (0..16 * nz).map(|i| i as f32 * 0.25 - 3.0).collect(),
        }
    }

    #[test]
    fn header_fields() {
        let bytes = sample(4, false).encode().unwrap();
        assert_eq!(get_i32(&bytes, 0), 4);
        assert_eq!(get_i32(&bytes, 12), 2);
        assert_eq!(get_i32(&bytes, 36), 4);
        assert_eq!(get_f32(&bytes, 40), 6.0);
        assert_eq!(&bytes[208..212], b"MAP ");
        assert_eq!(&bytes[212..216], &[0x44, 0x44, 0, 0]);
        assert_eq!(bytes.len(), 1024 + 64 * 4);
    }

    #[test]
    fn stack_roundtrip() {
        let m = sample(3, true);
        let back = MrcMap::decode(&m.encode().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unsupported_mode_and_magic() {
        let mut bytes = sample(2, false).encode().unwrap();
        put_i32(&mut bytes, 12, 1);
        match MrcMap::decode(&bytes) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "MODE"),
            other => panic!("{other:?}"),
        }
        bytes[208] = b'X';
        assert!(matches!(MrcMap::decode(&bytes), Err(Error::Format { field: "MAP", .. })));
    }
}
