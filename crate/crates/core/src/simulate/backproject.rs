use crate::error::{Error, Result};
use crate::fourier::{
    freq_to_grid, hartley_2d, inverse_hartley_3d, phase_shift_center, rotated_slice_coords,
    trilinear_periodic, HartleyVolume,
};
use crate::phantom::VoxelVolume;

use super::{ctf_evaluate, CtfParams, ParticleDataset, Pose};

/// Default Wiener floor as a fraction of the largest denominator entry.
pub const DEFAULT_WIENER_FLOOR: f64 = 1e-2;

/// Wiener-filtered direct Fourier backprojection.
///
/// Every in-band lattice point of each image splats `CTF·H(image)` into a
/// numerator and `CTF²` into a denominator with trilinear weights. The
/// output is the inverse transform of `num / (den + floor·max(den))`.
/// Images are accumulated in the given order.
pub fn backproject(
    images: &[&[f64]],
    poses: &[Pose],
    ctfs: &[CtfParams],
    d: usize,
    pixel_size: f64,
    wiener_floor: f64,
) -> Result<VoxelVolume> {
    if images.is_empty() {
        return Err(Error::Argument("backprojection needs at least one image".into()));
    }
    if poses.len() != images.len() || ctfs.len() != images.len() {
        return Err(Error::Argument(format!(
            "{} images, {} poses, {} ctfs",
            images.len(),
            poses.len(),
            ctfs.len()
        )));
    }
    if !(wiener_floor.is_finite() && wiener_floor >= 0.0) {
        return Err(Error::Argument(format!("wiener floor must be non-negative, got {wiener_floor}")));
    }
    let n3 = d * d * d;
    let mut num = vec![0.0f64; n3];
    let mut den = vec![0.0f64; n3];
    for ((img, pose), ctf) in images.iter().zip(poses).zip(ctfs) {
        if img.len() != d * d {
            return Err(Error::shape("backproject", format!("image has {} pixels, expected {}", img.len(), d * d)));
        }
        let mut h = hartley_2d(img, d, pixel_size)?;
        if pose.shift != (0.0, 0.0) {
            h = phase_shift_center(&h, pose.shift);
        }
        let c = ctf_evaluate(ctf, d, pixel_size);
        let lattice = rotated_slice_coords(&pose.rotation, d)?;
        for i in lattice.band_indices() {
            let (a, b) = (c[i] * h.values[i], c[i] * c[i]);
            for (j, w) in trilinear_periodic(freq_to_grid(lattice.coords[i], d), d) {
                num[j] += w * a;
                den[j] += w * b;
            }
        }
    }
    let eps = wiener_floor * den.iter().copied().fold(0.0, f64::max);
    let values = num
        .iter()
        .zip(&den)
        .map(|(&n, &q)| if q + eps > 0.0 { n / (q + eps) } else { 0.0 })
        .collect();
    inverse_hartley_3d(&HartleyVolume {
        size: d,
        values,
        voxel_size: pixel_size,
    })
}

/// Backprojects the dataset images at `indices`.
pub fn backproject_dataset(ds: &ParticleDataset, indices: &[usize], wiener_floor: f64) -> Result<VoxelVolume> {
    let imgs: Vec<Vec<f64>> = indices.iter().map(|&i| ds.image_f64(i)).collect();
    let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let poses: Vec<Pose> = indices.iter().map(|&i| ds.poses[i]).collect();
    let ctfs: Vec<CtfParams> = indices.iter().map(|&i| ds.ctfs[i]).collect();
    backproject(&refs, &poses, &ctfs, ds.size, ds.pixel_size, wiener_floor)
}
