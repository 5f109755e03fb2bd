//! Procedural density phantoms and volume file I/O.
//!
//! A phantom is a sum of anisotropic Gaussian blobs whose centers follow a
//! seeded random walk. The connectivity bias mixes the previous step
//! direction into the next one, so high bias gives elongated chains and low
//! bias gives compact clusters. Density is clipped to a ball of radius
//! `0.35·D` and the peak is normalized to 1.

pub mod mrc;

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::Rotation;
use crate::rng;
use mrc::MrcMap;

/// Fraction of the box side bounding the density support radius.
pub const SUPPORT_FRACTION: f64 = 0.35;

pub const BLOB_COUNT_RANGE: (usize, usize) = (1, 40);
/// Blob counts drawn for dataset structures.
pub const DATASET_BLOB_RANGE: (usize, usize) = (8, 40);
pub const SIGMA_RANGE: (f64, f64) = (1.5, 4.0);
pub const AMPLITUDE_RANGE: (f64, f64) = (0.5, 1.0);

/// Cubic real-valued density grid, index `[z][y][x]`, origin at `D/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVolume {
    pub size: usize,
    /// Ångström per voxel.
    pub voxel_size: f64,
    pub values: Vec<f64>,
}

impl VoxelVolume {
    pub fn zeros(size: usize, voxel_size: f64) -> Self {
        VoxelVolume {
            size,
            voxel_size,
            values: vec![0.0; size * size * size],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.size + y) * self.size + x
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Zeroes everything farther than `radius` voxels from the center.
    pub fn apply_spherical_mask(&mut self, radius: f64) {
        let d = self.size;
        let c = (d / 2) as f64;
        let r2 = radius * radius;
        for z in 0..d {
            for y in 0..d {
                for x in 0..d {
                    let dist2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                    if dist2 > r2 {
                        let i = self.index(x, y, z);
                        self.values[i] = 0.0;
                    }
                }
            }
        }
    }

    pub fn to_mrc(&self) -> MrcMap {
        let vs = self.voxel_size as f32;
        MrcMap {
            nx: self.size,
            ny: self.size,
            nz: self.size,
            voxel_size: [vs; 3],
            is_stack: false,
            data: self.values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_mrc(m: &MrcMap) -> Result<VoxelVolume> {
        if m.nx != m.ny || m.ny != m.nz {
            return Err(Error::Format {
                field: "NX/NY/NZ",
                detail: format!("volume must be cubic, got {}x{}x{}", m.nx, m.ny, m.nz),
            });
        }
        Ok(VoxelVolume {
            size: m.nx,
            voxel_size: m.voxel_size[0] as f64,
            values: m.data.iter().map(|&v| v as f64).collect(),
        })
    }
}

/// Writes a volume as an MRC2014 mode-2 map.
pub fn write_mrc(v: &VoxelVolume, path: &Path) -> Result<()> {
    v.to_mrc().write(path)
}

pub fn read_mrc(path: &Path) -> Result<VoxelVolume> {
    VoxelVolume::from_mrc(&MrcMap::read(path)?)
}

/// Parameters of one procedural structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_blobs: usize,
    pub sigma_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub connectivity_bias: f64,
}

fn within(name: &str, r: (f64, f64), bounds: (f64, f64)) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && bounds.0 <= r.0 && r.0 <= r.1 && r.1 <= bounds.1) {
        return Err(Error::Argument(format!(
            "{name} {:?} must be an ordered sub-range of {:?}",
            r, bounds
        )));
    }
    Ok(())
}

impl PhantomSpec {
    /// Spec for structure `index` of a set seeded by `base_seed`.
    pub fn for_structure(base_seed: u64, index: u64, connectivity_bias: f64) -> PhantomSpec {
        let seed = rng::derive(base_seed, index);
        let mut r = rng::stream(seed, u64::MAX);
        PhantomSpec {
            seed,
            n_blobs: r.random_range(DATASET_BLOB_RANGE.0..=DATASET_BLOB_RANGE.1),
            sigma_range: SIGMA_RANGE,
            amplitude_range: AMPLITUDE_RANGE,
            connectivity_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blobs < BLOB_COUNT_RANGE.0 || self.n_blobs > BLOB_COUNT_RANGE.1 {
            return Err(Error::Argument(format!(
                "n_blobs {} outside {:?}",
                self.n_blobs, BLOB_COUNT_RANGE
            )));
        }
        within("sigma_range", self.sigma_range, SIGMA_RANGE)?;
        within("amplitude_range", self.amplitude_range, AMPLITUDE_RANGE)?;
        if !(0.0..=1.0).contains(&self.connectivity_bias) {
            return Err(Error::Argument(format!(
                "connectivity_bias {} outside [0, 1]",
                self.connectivity_bias
            )));
        }
        Ok(())
    }
}

struct Blob {
    center: [f64; 3],
    /// Rows are the blob's principal axes.
    axes: Rotation,
    inv_var: [f64; 3],
    amplitude: f64,
}

fn unit_vector(r: &mut rng::Rng) -> [f64; 3] {
    loop {
        let v = [
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_rotation(r: &mut rng::Rng) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let n2: f64 = q.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return Rotation::from_quaternion(q.map(|x| x / n));
        }
    }
}

/// Deterministic blob-chain phantom on a `d³` grid.
pub fn generate_phantom(spec: &PhantomSpec, d: usize, voxel_size: f64) -> Result<VoxelVolume> {
    spec.validate()?;
    if d < 16 || d % 2 != 0 {
        return Err(Error::UnsupportedSize(format!(
            "phantom side must be even and >= 16, got {d}"
        )));
    }
    let mut r = rng::stream(spec.seed, 0);
    let support = SUPPORT_FRACTION * d as f64;
    let mut blobs = Vec::with_capacity(spec.n_blobs);
    let mut pos = [0.0f64; 3];
    let mut dir = unit_vector(&mut r);
    for b in 0..spec.n_blobs {
        let sig: [f64; 3] =
            std::array::from_fn(|_| r.random_range(spec.sigma_range.0..=spec.sigma_range.1));
        let axes = random_rotation(&mut r);
        let amplitude = r.random_range(spec.amplitude_range.0..=spec.amplitude_range.1);
        let mean_sigma = (sig[0] + sig[1] + sig[2]) / 3.0;
        if b > 0 {
            let fresh = unit_vector(&mut r);
            let w = spec.connectivity_bias;
            let mixed: [f64; 3] = std::array::from_fn(|a| w * dir[a] + (1.0 - w) * fresh[a]);
            let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
            dir = if n > 1e-9 { mixed.map(|x| x / n) } else { fresh };
            let step = r.random_range(1.0..1.5) * mean_sigma;
            for a in 0..3 {
                pos[a] += step * dir[a];
            }
        }
        // reflect the walk at the support sphere
        let rad = pos.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rad > support {
            pos = pos.map(|x| x * support / rad);
            dir = dir.map(|x| -x);
        }
        blobs.push(Blob {
            center: pos,
            axes,
            inv_var: sig.map(|s| 1.0 / (s * s)),
            amplitude,
        });
    }

    let mut vol = VoxelVolume::zeros(d, voxel_size);
    let c = (d / 2) as f64;
    let s2 = support * support;
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let p = [x as f64 - c, y as f64 - c, z as f64 - c];
                if p.iter().map(|v| v * v).sum::<f64>() > s2 {
                    continue;
                }
                let mut acc = 0.0;
                for b in &blobs {
                    let rel = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
                    let local = b.axes.transpose().apply(rel);
                    let q = local[0] * local[0] * b.inv_var[0]
                        + local[1] * local[1] * b.inv_var[1]
                        + local[2] * local[2] * b.inv_var[2];
                    if q < 60.0 {
                        acc += b.amplitude * (-0.5 * q).exp();
                    }
                }
                let i = vol.index(x, y, z);
                vol.values[i] = acc;
            }
        }
    }
    let peak = vol.max();
    if peak > 0.0 {
        vol.values.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec::for_structure(seed, 0, 0.6)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(&spec(3), 32, 6.0).unwrap();
        let b = generate_phantom(&spec(3), 32, 6.0).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!((a.max() - 1.0).abs() < 1e-12);
        assert!(a.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn support_stays_inside_radius() {
        for seed in 0..5 {
            let d = 32;
            let v = generate_phantom(&spec(seed), d, 6.0).unwrap();
            let c = (d / 2) as f64;
            let lim = SUPPORT_FRACTION * d as f64;
            for z in 0..d {
                for y in 0..d {
                    for x in 0..d {
                        let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
                        if r > lim {
                            assert_eq!(v.values[v.index(x, y, z)], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_centered_blob_is_point_symmetric() {
        let s = PhantomSpec {
            seed: 11,
            n_blobs: 1,
            sigma_range: (1.5, 4.0),
            amplitude_range: (0.5, 1.0),
            connectivity_bias: 0.5,
        };
        let d = 16;
        let v = generate_phantom(&s, d, 1.0).unwrap();
        for z in 1..d {
            for y in 1..d {
                for x in 1..d {
                    let a = v.values[v.index(x, y, z)];
                    let b = v.values[v.index(d - x, d - y, d - z)];
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn out_of_range_specs_are_rejected() {
        let mut s = spec(1);
        s.n_blobs = 41;
        assert!(generate_phantom(&s, 32, 1.0).is_err());
        let mut s = spec(1);
        s.sigma_range = (1.0, 4.0);
        assert!(s.validate().is_err());
        let mut s = spec(1);
        s.connectivity_bias = 1.5;
        assert!(s.validate().is_err());
        assert!(generate_phantom(&spec(1), 15, 1.0).is_err());
    }

    #[test]
    fn mrc_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mrc");
        let mut r = rng::stream(5, 0);
        let v = VoxelVolume {
            size: 16,
            voxel_size: 1.5,
            values: (0..16 * 16 * 16).map(|_| r.random_range(-2.0f32..2.0) as f64).collect(),
        };
        write_mrc(&v, &path).unwrap();
        let back = read_mrc(&path).unwrap();
        assert_eq!(back, v);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(i32::from_le_bytes(raw[0..4].try_into().unwrap()), 16);
        assert_eq!(i32::from_le_bytes(raw[12..16].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(raw[40..44].try_into().unwrap()), 24.0);
    }
}
