//! Real-valued frequency-space machinery.
//!
//! Transforms are centered: the real-space origin and the DC term both sit
//! at index `D/2` along every axis, so for even `D` the shift before and
//! after the FFT is the same roll by `D/2`. The Hartley transform is
//! `Re(F) - Im(F)` of that centered DFT; the forward map is unnormalized and
//! the inverse carries `1/D^n`, which makes the round trip exact and gives
//! `sum(x^2) = sum(H^2) / D^n`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::phantom::VoxelVolume;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn check_even(d: usize) -> Result<()> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::UnsupportedSize(format!(
            "transform size must be even and positive, got {d}"
        )));
    }
    Ok(())
}

/// Unnormalized DFT along every axis of a cubic array with side `d` and
/// `rank` axes, last axis fastest.
fn fft_axes(data: &mut [Complex64], d: usize, rank: usize, inverse: bool) {
    let fft = plan(d, inverse);
    let total = data.len();
    let mut line = vec![Complex64::new(0.0, 0.0); d];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for axis in 0..rank {
        let stride = d.pow((rank - 1 - axis) as u32);
        if stride == 1 {
            for chunk in data.chunks_mut(d) {
                fft.process_with_scratch(chunk, &mut scratch);
            }
            continue;
        }
        let block = stride * d;
        for base in (0..total).step_by(block) {
            for off in 0..stride {
                let start = base + off;
                for (i, v) in line.iter_mut().enumerate() {
                    *v = data[start + i * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (i, v) in line.iter().enumerate() {
                    data[start + i * stride] = *v;
                }
            }
        }
    }
}

/// Roll every axis by `d/2` (its own inverse for even `d`).
fn roll_half<T: Copy>(src: &[T], d: usize, rank: usize) -> Vec<T> {
    let h = d / 2;
    let mut out = src.to_vec();
    match rank {
        2 => {
            for y in 0..d {
                for x in 0..d {
                    out[((y + h) % d) * d + (x + h) % d] = src[y * d + x];
                }
            }
        }
        3 => {
            for z in 0..d {
                for y in 0..d {
                    for x in 0..d {
                        out[(((z + h) % d) * d + (y + h) % d) * d + (x + h) % d] =
                            src[(z * d + y) * d + x];
                    }
                }
            }
        }
        _ => unreachable!("rank 2 or 3 only"),
    }
    out
}

/// Centered complex DFT (origin and DC at `d/2`), unnormalized.
pub fn centered_dft(real: &[f64], d: usize, rank: usize) -> Result<Vec<Complex64>> {
    check_even(d)?;
    if real.len() != d.pow(rank as u32) {
        return Err(Error::shape(
            "centered_dft",
            format!("{} values for side {d} rank {rank}", real.len()),
        ));
    }
    let shifted = roll_half(real, d, rank);
    let mut c: Vec<Complex64> = shifted.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_axes(&mut c, d, rank, false);
    Ok(roll_half(&c, d, rank))
}

/// Inverse of [`centered_dft`], normalized by `1/d^rank`.
pub fn centered_idft(freq: &[Complex64], d: usize, rank: usize) -> Result<Vec<Complex64>> {
    check_even(d)?;
    let mut c = roll_half(freq, d, rank);
    fft_axes(&mut c, d, rank, true);
    let scale = 1.0 / (d.pow(rank as u32) as f64);
    let out = roll_half(&c, d, rank);
    Ok(out.into_iter().map(|v| v * scale).collect())
}

fn hartley_nd(x: &[f64], d: usize, rank: usize) -> Result<Vec<f64>> {
    Ok(centered_dft(x, d, rank)?
        .into_iter()
        .map(|c| c.re - c.im)
        .collect())
}

/// Centered 2D Hartley image with DC at `(D/2, D/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HartleyImage {
    pub size: usize,
    pub values: Vec<f64>,
    pub pixel_size: f64,
}

/// Centered 3D Hartley volume, index `[z][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HartleyVolume {
    pub size: usize,
    pub values: Vec<f64>,
    pub voxel_size: f64,
}

/// Forward 2D Hartley transform of a `d×d` real image (row-major, x fastest).
pub fn hartley_2d(img: &[f64], d: usize, pixel_size: f64) -> Result<HartleyImage> {
    Ok(HartleyImage {
        size: d,
        values: hartley_nd(img, d, 2)?,
        pixel_size,
    })
}

/// Inverse 2D Hartley transform.
pub fn inverse_hartley_2d(h: &HartleyImage) -> Result<Vec<f64>> {
    let d = h.size;
    let scale = 1.0 / (d * d) as f64;
    Ok(hartley_nd(&h.values, d, 2)?
        .into_iter()
        .map(|v| v * scale)
        .collect())
}

pub fn hartley_3d(v: &VoxelVolume) -> Result<HartleyVolume> {
    Ok(HartleyVolume {
        size: v.size,
        values: hartley_nd(&v.values, v.size, 3)?,
        voxel_size: v.voxel_size,
    })
}

pub fn inverse_hartley_3d(h: &HartleyVolume) -> Result<VoxelVolume> {
    let d = h.size;
    let scale = 1.0 / (d * d * d) as f64;
    let values = hartley_nd(&h.values, d, 3)?
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Ok(VoxelVolume {
        size: d,
        voxel_size: h.voxel_size,
        values,
    })
}

/// Proper rotation matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Rotation by `angle` about a unit axis (Rodrigues).
    pub fn about_axis(axis: [f64; 3], angle: f64) -> Rotation {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Rotation([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    /// From a unit quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4]) -> Rotation {
        let [w, x, y, z] = q;
        Rotation([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.0;
        Rotation([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Frobenius norm of `RᵀR - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let m = &self.0;
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let e = dot - if i == j { 1.0 } else { 0.0 };
                s += e * e;
            }
        }
        s.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let err = self.orthonormality_error();
        if !(err <= 1e-6) {
            return Err(Error::Geometry(format!(
                "rotation is not orthonormal: ||RᵀR - I|| = {err:.3e}"
            )));
        }
        let det = self.det();
        if det <= 0.0 {
            return Err(Error::Geometry(format!(
                "rotation has determinant {det:.6}, expected +1"
            )));
        }
        Ok(())
    }

    pub fn flat(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn from_flat(f: [f64; 9]) -> Rotation {
        Rotation([[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]])
    }
}

/// Frequency coordinates (cycles/pixel) of every pixel of a `D×D` image.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyLattice {
    pub size: usize,
    pub coords: Vec<[f64; 3]>,
    /// `|k| <= 0.5`.
    pub in_band: Vec<bool>,
}

impl FrequencyLattice {
    /// Indices of in-band pixels, in row-major order.
    pub fn band_indices(&self) -> Vec<usize> {
        (0..self.coords.len()).filter(|&i| self.in_band[i]).collect()
    }
}

/// Cycles/pixel coordinate of grid index `i` on a centered axis of side `d`.
#[inline]
pub fn freq_of(i: usize, d: usize) -> f64 {
    (i as f64 - (d / 2) as f64) / d as f64
}

/// Disk mask `|k| <= 0.5` of a centered `d×d` grid.
pub fn disk_mask(d: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(d * d);
    for y in 0..d {
        for x in 0..d {
            let (kx, ky) = (freq_of(x, d), freq_of(y, d));
            m.push(kx * kx + ky * ky <= 0.25);
        }
    }
    m
}

/// Central-slice lattice `(k_x, k_y, 0)` rotated by `rot`.
pub fn rotated_slice_coords(rot: &Rotation, d: usize) -> Result<FrequencyLattice> {
    check_even(d)?;
    rot.validate()?;
    let mut coords = Vec::with_capacity(d * d);
    let mut in_band = Vec::with_capacity(d * d);
    for y in 0..d {
        for x in 0..d {
            let k = [freq_of(x, d), freq_of(y, d), 0.0];
            in_band.push(k[0] * k[0] + k[1] * k[1] <= 0.25);
            coords.push(rot.apply(k));
        }
    }
    Ok(FrequencyLattice {
        size: d,
        coords,
        in_band,
    })
}

/// Trilinear weights at fractional grid position `p` with periodic wrap.
#[inline]
pub(crate) fn trilinear_periodic(p: [f64; 3], d: usize) -> [(usize, f64); 8] {
    let fl = [p[0].floor(), p[1].floor(), p[2].floor()];
    let fr = [p[0] - fl[0], p[1] - fl[1], p[2] - fl[2]];
    let di = d as i64;
    let base = [fl[0] as i64, fl[1] as i64, fl[2] as i64];
    let mut out = [(0usize, 0.0f64); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let o = [(c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64];
        let w = (0..3)
            .map(|a| if o[a] == 1 { fr[a] } else { 1.0 - fr[a] })
            .product::<f64>();
        let ix = (base[0] + o[0]).rem_euclid(di) as usize;
        let iy = (base[1] + o[1]).rem_euclid(di) as usize;
        let iz = (base[2] + o[2]).rem_euclid(di) as usize;
        *slot = ((iz * d + iy) * d + ix, w);
    }
    out
}

/// Grid position of a frequency coordinate on a centered axis of side `d`.
#[inline]
pub fn freq_to_grid(k: [f64; 3], d: usize) -> [f64; 3] {
    let h = (d / 2) as f64;
    let df = d as f64;
    [k[0] * df + h, k[1] * df + h, k[2] * df + h]
}

/// Trilinear sample of a centered Hartley volume on the in-band lattice points.
pub fn extract_slice(vol: &HartleyVolume, lattice: &FrequencyLattice) -> Result<HartleyImage> {
    if lattice.size != vol.size {
        return Err(Error::UnsupportedSize(format!(
            "lattice side {} differs from volume side {}",
            lattice.size, vol.size
        )));
    }
    let d = vol.size;
    let mut values = vec![0.0; d * d];
    for (i, k) in lattice.coords.iter().enumerate() {
        if !lattice.in_band[i] {
            continue;
        }
        values[i] = trilinear_periodic(freq_to_grid(*k, d), d)
            .iter()
            .map(|&(j, w)| w * vol.values[j])
            .sum();
    }
    Ok(HartleyImage {
        size: d,
        values,
        pixel_size: vol.voxel_size,
    })
}

/// Trilinear sample of a real volume, zero outside the grid.
fn sample_zero_pad(vals: &[f64], d: usize, p: [f64; 3]) -> f64 {
    let fl = [p[0].floor(), p[1].floor(), p[2].floor()];
    if fl.iter().any(|&f| f < -1.0 || f > d as f64 - 1.0) {
        return 0.0;
    }
    let fr = [p[0] - fl[0], p[1] - fl[1], p[2] - fl[2]];
    let b = [fl[0] as i64, fl[1] as i64, fl[2] as i64];
    let di = d as i64;
    let mut acc = 0.0;
    for c in 0..8 {
        let o = [(c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64];
        let (x, y, z) = (b[0] + o[0], b[1] + o[1], b[2] + o[2]);
        if x < 0 || y < 0 || z < 0 || x >= di || y >= di || z >= di {
            continue;
        }
        let w: f64 = (0..3)
            .map(|a| if o[a] == 1 { fr[a] } else { 1.0 - fr[a] })
            .product();
        acc += w * vals[((z * di + y) * di + x) as usize];
    }
    acc
}

/// Line integral along z of the volume resampled at `R·r`.
///
/// This is the real-space counterpart of [`extract_slice`] on the lattice
/// from [`rotated_slice_coords`] with the same rotation.
pub fn real_project(v: &VoxelVolume, rot: &Rotation) -> Result<Vec<f64>> {
    let d = v.size;
    check_even(d)?;
    if v.values.len() != d * d * d {
        return Err(Error::shape("real_project", "volume is not cubic"));
    }
    let c = (d / 2) as f64;
    let mut img = vec![0.0; d * d];
    for y in 0..d {
        for x in 0..d {
            let mut s = 0.0;
            for z in 0..d {
                let r = [x as f64 - c, y as f64 - c, z as f64 - c];
                let p = rot.apply(r);
                s += sample_zero_pad(&v.values, d, [p[0] + c, p[1] + c, p[2] + c]);
            }
            img[y * d + x] = s;
        }
    }
    Ok(img)
}

/// Hartley-domain translation that moves the real-space image by `-t` pixels.
///
/// `H'(k) = H(k) cos φ + H(-k) sin φ` with `φ = 2π k·(-t)`. The Nyquist
/// row and column pair with themselves and are exact only for whole-pixel
/// shifts.
pub fn phase_shift_center(img: &HartleyImage, t: (f64, f64)) -> HartleyImage {
    let d = img.size;
    let (sx, sy) = (-t.0, -t.1);
    let mut out = vec![0.0; d * d];
    for y in 0..d {
        for x in 0..d {
            let (kx, ky) = (freq_of(x, d), freq_of(y, d));
            let phi = 2.0 * PI * (kx * sx + ky * sy);
            let (s, c) = phi.sin_cos();
            let neg = ((d - y) % d) * d + (d - x) % d;
            out[y * d + x] = img.values[y * d + x] * c + img.values[neg] * s;
        }
    }
    HartleyImage {
        size: d,
        values: out,
        pixel_size: img.pixel_size,
    }
}

/// Fourier-crop downsampling of a real image from `d` to `d_out` pixels,
/// preserving the mean intensity.
pub fn fourier_crop(img: &[f64], d: usize, d_out: usize) -> Result<Vec<f64>> {
    check_even(d)?;
    check_even(d_out)?;
    if d_out > d {
        return Err(Error::UnsupportedSize(format!("cannot crop {d} up to {d_out}")));
    }
    let f = centered_dft(img, d, 2)?;
    let off = (d - d_out) / 2;
    let mut cropped = Vec::with_capacity(d_out * d_out);
    for y in 0..d_out {
        for x in 0..d_out {
            cropped.push(f[(y + off) * d + x + off]);
        }
    }
    let ratio = (d_out * d_out) as f64 / (d * d) as f64;
    Ok(centered_idft(&cropped, d_out, 2)?
        .into_iter()
        .map(|c| c.re * ratio)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
        let mut q: [f64; 4] = [0.0; 4];
        loop {
            for v in q.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>();
            if n > 1e-3 && n <= 1.0 {
                let n = n.sqrt();
                q.iter_mut().for_each(|v| *v /= n);
                return Rotation::from_quaternion(q);
            }
        }
    }

    #[test]
    fn delta_at_center_transforms_to_constant() {
        let d = 8;
        let mut img = vec![0.0; d * d];
        img[(d / 2) * d + d / 2] = 2.0;
        let h = hartley_2d(&img, d, 1.0).unwrap();
        assert!(h.values.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn hartley_roundtrip_and_parseval() {
        let d = 16;
        let img = random_image(d, 1);
        let h = hartley_2d(&img, d, 1.0).unwrap();
        let back = inverse_hartley_2d(&h).unwrap();
        let norm: f64 = img.iter().map(|x| x * x).sum::<f64>().sqrt();
        let err: f64 = img
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err / norm < 1e-10);
        let e_real: f64 = img.iter().map(|x| x * x).sum();
        let e_freq: f64 = h.values.iter().map(|x| x * x).sum::<f64>() / (d * d) as f64;
        assert!((e_real - e_freq).abs() / e_real < 1e-12);
    }

    #[test]
    fn hartley_is_linear() {
        let d = 8;
        let a = random_image(d, 2);
        let b = random_image(d, 3);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        let (ha, hb, hm) = (
            hartley_2d(&a, d, 1.0).unwrap(),
            hartley_2d(&b, d, 1.0).unwrap(),
            hartley_2d(&mix, d, 1.0).unwrap(),
        );
        for i in 0..d * d {
            assert!((hm.values[i] - (2.0 * ha.values[i] - 0.5 * hb.values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_size_is_rejected() {
        assert!(matches!(
            hartley_2d(&[0.0; 9], 3, 1.0),
            Err(Error::UnsupportedSize(_))
        ));
    }

    #[test]
    fn identity_lattice_is_flat_and_centered() {
        let d = 8;
        let lat = rotated_slice_coords(&Rotation::IDENTITY, d).unwrap();
        assert!(lat.coords.iter().all(|k| k[2] == 0.0));
        assert_eq!(lat.coords[(d / 2) * d + d / 2], [0.0, 0.0, 0.0]);
        // corners out of band
        assert!(!lat.in_band[0]);
    }

    #[test]
    fn rotation_by_pi_about_x_negates_ky() {
        let d = 8;
        let rot = Rotation::about_axis([1.0, 0.0, 0.0], PI);
        let lat = rotated_slice_coords(&rot, d).unwrap();
        let base = rotated_slice_coords(&Rotation::IDENTITY, d).unwrap();
        for (k, b) in lat.coords.iter().zip(&base.coords) {
            assert!((k[0] - b[0]).abs() < 1e-12);
            assert!((k[1] + b[1]).abs() < 1e-12);
            assert!(k[2].abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_frequency_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let rot = random_rotation(&mut rng);
            let lat = rotated_slice_coords(&rot, 16).unwrap();
            let base = rotated_slice_coords(&Rotation::IDENTITY, 16).unwrap();
            for (k, b) in lat.coords.iter().zip(&base.coords) {
                let nk = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
                assert!((nk - nb).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn non_orthonormal_rotation_reports_error_norm() {
        let bad = Rotation([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        match rotated_slice_coords(&bad, 8) {
            Err(Error::Geometry(msg)) => assert!(msg.contains("RᵀR"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let reflection = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        assert!(reflection.validate().is_err());
    }

    #[test]
    fn identity_slice_is_central_plane() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vol = HartleyVolume {
            size: d,
            values: (0..d * d * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            voxel_size: 1.0,
        };
        let lat = rotated_slice_coords(&Rotation::IDENTITY, d).unwrap();
        let s = extract_slice(&vol, &lat).unwrap();
        let plane = &vol.values[(d / 2) * d * d..(d / 2 + 1) * d * d];
        for i in 0..d * d {
            if lat.in_band[i] {
                assert_eq!(s.values[i], plane[i]);
            } else {
                assert_eq!(s.values[i], 0.0);
            }
        }
    }

    #[test]
    fn slice_size_mismatch_is_an_error() {
        let vol = HartleyVolume {
            size: 8,
            values: vec![0.0; 512],
            voxel_size: 1.0,
        };
        let lat = rotated_slice_coords(&Rotation::IDENTITY, 16).unwrap();
        assert!(extract_slice(&vol, &lat).is_err());
    }

    #[test]
    fn spherical_volume_slices_agree_across_rotations() {
        // isotropic in frequency space; trilinear error shrinks as 1/D²
        let d = 128;
        let s2 = 0.15f64 * 0.15;
        let mut values = vec![0.0; d * d * d];
        for z in 0..d {
            for y in 0..d {
                for x in 0..d {
                    let k2 = freq_of(x, d).powi(2) + freq_of(y, d).powi(2) + freq_of(z, d).powi(2);
                    values[(z * d + y) * d + x] = (-k2 / (2.0 * s2)).exp();
                }
            }
        }
        let h = HartleyVolume { size: d, values, voxel_size: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            let a = extract_slice(&h, &rotated_slice_coords(&random_rotation(&mut rng), d).unwrap()).unwrap();
            let b = extract_slice(&h, &rotated_slice_coords(&random_rotation(&mut rng), d).unwrap()).unwrap();
            let num: f64 = a.values.iter().zip(&b.values).map(|(p, q)| (p - q).powi(2)).sum();
            let den: f64 = a.values.iter().map(|p| p * p).sum();
            assert!((num / den).sqrt() < 1e-3, "{}", (num / den).sqrt());
        }
    }

    #[test]
    fn identity_projection_sums_columns() {
        let d = 8;
        let mut vals = vec![0.0; d * d * d];
        for z in 0..d {
            vals[(z * d + 3) * d + 5] = z as f64 + 1.0;
        }
        let v = VoxelVolume { size: d, voxel_size: 1.0, values: vals.clone() };
        let img = real_project(&v, &Rotation::IDENTITY).unwrap();
        assert_eq!(img[3 * d + 5], (1..=d).sum::<usize>() as f64);
        assert!((img.iter().sum::<f64>() - vals.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn zero_shift_is_identity_and_shifts_invert() {
        let d = 16;
        let img = random_image(d, 4);
        let mut h = hartley_2d(&img, d, 1.0).unwrap();
        // the self-paired Nyquist row/column only shifts exactly by whole pixels
        for i in 0..d {
            h.values[i] = 0.0;
            h.values[i * d] = 0.0;
        }
        assert_eq!(phase_shift_center(&h, (0.0, 0.0)).values, h.values);
        let there = phase_shift_center(&h, (2.3, -1.7));
        let back = phase_shift_center(&there, (-2.3, 1.7));
        for (a, b) in back.values.iter().zip(&h.values) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn integer_shift_is_circular_shift() {
        let d = 16;
        let img = random_image(d, 6);
        let h = hartley_2d(&img, d, 1.0).unwrap();
        let (tx, ty) = (3i64, -2i64);
        let shifted = inverse_hartley_2d(&phase_shift_center(&h, (tx as f64, ty as f64))).unwrap();
        let di = d as i64;
        for y in 0..di {
            for x in 0..di {
                // image moved by -t: out(x) = in(x + t)
                let sx = (x + tx).rem_euclid(di);
                let sy = (y + ty).rem_euclid(di);
                let want = img[(sy * di + sx) as usize];
                assert!((shifted[(y * di + x) as usize] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fourier_crop_preserves_mean() {
        let d = 16;
        let img = random_image(d, 8);
        let small = fourier_crop(&img, d, 8).unwrap();
        let m0 = img.iter().sum::<f64>() / (d * d) as f64;
        let m1 = small.iter().sum::<f64>() / 64.0;
        assert!((m0 - m1).abs() < 1e-12);
    }
}
