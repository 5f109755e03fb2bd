use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::centered_dft;
use crate::phantom::VoxelVolume;

/// Fourier shell correlation for integer shells `k = 1..=D/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscCurve {
    pub values: Vec<f64>,
}

impl FscCurve {
    /// Box side the curve was computed for.
    pub fn box_size(&self) -> usize {
        2 * self.values.len()
    }
}

fn check_same_grid(a: &VoxelVolume, b: &VoxelVolume) -> Result<()> {
    if a.size != b.size || a.values.len() != b.values.len() {
        return Err(Error::UnsupportedSize(format!(
            "volume sides differ: {} vs {}",
            a.size, b.size
        )));
    }
    if (a.voxel_size - b.voxel_size).abs() > 1e-6 * a.voxel_size.abs().max(b.voxel_size.abs()) {
        return Err(Error::UnsupportedSize(format!(
            "voxel sizes differ: {} vs {}",
            a.voxel_size, b.voxel_size
        )));
    }
    Ok(())
}

/// Per-shell `Re Σ F_A F_B* / √(Σ|F_A|² Σ|F_B|²)`; empty shells give 0.
pub fn fsc(a: &VoxelVolume, b: &VoxelVolume) -> Result<FscCurve> {
    check_same_grid(a, b)?;
    let d = a.size;
    let fa = centered_dft(&a.values, d, 3)?;
    let fb = centered_dft(&b.values, d, 3)?;
    let half = d / 2;
    let mut num = vec![0.0; half + 1];
    let mut na = vec![0.0; half + 1];
    let mut nb = vec![0.0; half + 1];
    let c = half as f64;
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
                let k = r.round() as usize;
                if k == 0 || k > half {
                    continue;
                }
                let i = (z * d + y) * d + x;
                num[k] += (fa[i] * fb[i].conj()).re;
                na[k] += fa[i].norm_sqr();
                nb[k] += fb[i].norm_sqr();
            }
        }
    }
    let values = (1..=half)
        .map(|k| {
            let den = (na[k] * nb[k]).sqrt();
            if den > 0.0 {
                num[k] / den
            } else {
                0.0
            }
        })
        .collect();
    Ok(FscCurve { values })
}

/// Trapezoidal area under the curve over normalized frequency `[0, 1]`
/// with `FSC(0) = 1`.
pub fn fsc_auc(curve: &FscCurve) -> f64 {
    let n = curve.values.len();
    if n == 0 {
        return 0.0;
    }
    let dx = 1.0 / n as f64;
    let mut prev = 1.0;
    let mut area = 0.0;
    for &v in &curve.values {
        area += 0.5 * (prev + v) * dx;
        prev = v;
    }
    area
}

/// Resolution in pixels (`D / k*`) at the first interpolated crossing
/// below `threshold`; 2.0 when the curve never drops below it.
pub fn fsc_resolution(curve: &FscCurve, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!("threshold {threshold} outside (0, 1)")));
    }
    let d = curve.box_size() as f64;
    let mut prev = 1.0;
    for (i, &v) in curve.values.iter().enumerate() {
        let k = (i + 1) as f64;
        if v < threshold {
            let k_star = (k - 1.0) + (prev - threshold) / (prev - v);
            return Ok(d / k_star);
        }
        prev = v;
    }
    Ok(2.0)
}

/// Occupied voxel centres in Å, `(index - D/2)·voxel_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub threshold: f64,
}

impl PointCloud {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
}

/// Voxels strictly above `threshold`.
pub fn to_pointcloud(v: &VoxelVolume, threshold: f64) -> Result<PointCloud> {
    if !threshold.is_finite() {
        return Err(Error::Argument(format!("threshold must be finite, got {threshold}")));
    }
    let d = v.size;
    let c = (d / 2) as f64;
    let mut points = Vec::new();
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                if v.values[v.index(x, y, z)] > threshold {
                    points.push([
                        (x as f64 - c) * v.voxel_size,
                        (y as f64 - c) * v.voxel_size,
                        (z as f64 - c) * v.voxel_size,
                    ]);
                }
            }
        }
    }
    Ok(PointCloud { points, threshold })
}

/// Exact nearest-neighbour index over uniform grid buckets.
struct GridIndex<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    origin: [f64; 3],
    buckets: HashMap<[i64; 3], Vec<usize>>,
    extent: [i64; 3],
}

impl<'a> GridIndex<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().max(1.0);
        let cell = if span > 0.0 { span / per_axis } else { 1.0 };
        let mut g = GridIndex {
            points,
            cell,
            origin: lo,
            buckets: HashMap::new(),
            extent: [0; 3],
        };
        for (i, p) in points.iter().enumerate() {
            let k = g.key(p);
            for a in 0..3 {
                g.extent[a] = g.extent[a].max(k[a]);
            }
            g.buckets.entry(k).or_default().push(i);
        }
        g
    }

    fn key(&self, p: &[f64; 3]) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let k = self.key(q);
        let mut best = f64::INFINITY;
        let reach = (0..3)
            .map(|a| k[a].abs().max((k[a] - self.extent[a]).abs()))
            .max()
            .unwrap_or(0)
            + 1;
        for r in 0..=reach {
            // cells at Chebyshev ring r are at least (r-1)·cell away
            if r > 0 {
                let bound = (r - 1) as f64 * self.cell;
                if bound * bound > best {
                    break;
                }
            }
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &i in b {
                                let p = &self.points[i];
                                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                                best = best.min(d2);
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn mean_nearest(from: &PointCloud, to: &PointCloud) -> f64 {
    let idx = GridIndex::new(&to.points);
    from.points.iter().map(|p| idx.nearest_sq(p).sqrt()).sum::<f64>() / from.len() as f64
}

/// Halved sum of the two directional mean nearest-neighbour distances, Å.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "chamfer distance needs two non-empty clouds, got {} and {} points",
            a.len(),
            b.len()
        )));
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// Intersection over union of `{A > ta}` and `{B > tb}`; 0 for an empty union.
pub fn viou(a: &VoxelVolume, b: &VoxelVolume, ta: f64, tb: f64) -> Result<f64> {
    if a.values.len() != b.values.len() || a.size != b.size {
        return Err(Error::UnsupportedSize(format!(
            "volume sides differ: {} vs {}",
            a.size, b.size
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (p, q) = (x > ta, y > tb);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}
