//! Image formation, dataset assembly and the backprojection baseline.
//!
//! Each particle draws its pose and CTF from its own random stream keyed by
//! its position before shuffling, and its noise from a second stream, so
//! synthesis is order-free and any image can be regenerated from the
//! manifest.

mod backproject;
pub mod ctf;
pub mod io;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{hartley_2d, inverse_hartley_2d, phase_shift_center, real_project, Rotation};
use crate::phantom::{PhantomSpec, VoxelVolume};
use crate::rng::{self, Rng};

pub use backproject::{backproject, backproject_dataset, DEFAULT_WIENER_FLOOR};
pub use ctf::{ctf_evaluate, CtfParams, CtfRanges};
pub use io::{read_dataset, write_dataset};

/// Particle orientation and in-plane offset in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub shift: (f64, f64),
}

impl Pose {
    pub fn identity() -> Pose {
        Pose {
            rotation: Rotation::IDENTITY,
            shift: (0.0, 0.0),
        }
    }
}

/// Rotation uniform on SO(3) and shift uniform in `[-t_max, t_max]²`.
pub fn sample_pose(rng: &mut Rng, t_max: f64) -> Pose {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let shift = if t_max > 0.0 {
        (rng.random_range(-t_max..=t_max), rng.random_range(-t_max..=t_max))
    } else {
        (0.0, 0.0)
    };
    Pose {
        rotation: Rotation::from_quaternion(q),
        shift,
    }
}

fn uniform(rng: &mut Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// CTF parameters drawn uniformly from `ranges`.
pub fn sample_ctf(rng: &mut Rng, ranges: &CtfRanges) -> CtfParams {
    let mean = uniform(rng, ranges.defocus);
    let astig = uniform(rng, ranges.astigmatism);
    let angle = rng.random_range(0.0..PI);
    CtfParams {
        defocus_u: mean + 0.5 * astig,
        defocus_v: mean - 0.5 * astig,
        astig_angle: angle,
        voltage: ranges.voltage,
        cs: ranges.cs,
        amp_contrast: ranges.amp_contrast,
        phase_shift: ranges.phase_shift,
        b_factor: ranges.b_factor,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Images per structure.
    pub n_per: usize,
    /// Signal-to-noise variance ratio; `"inf"` disables noise.
    #[serde(with = "maybe_inf")]
    pub snr: f64,
    /// Å per pixel.
    pub pixel_size: f64,
    /// Maximum in-plane shift in pixels.
    pub t_max: f64,
    /// When false every image uses [`CtfParams::identity`].
    pub ctf: bool,
    pub ctf_ranges: CtfRanges,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n_per: 200,
            snr: 0.01,
            pixel_size: 6.0,
            t_max: 0.0,
            ctf: true,
            ctf_ranges: CtfRanges::default(),
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per == 0 {
            return Err(Error::Argument("n_per must be at least 1".into()));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return Err(Error::Argument(format!("snr must be positive, got {}", self.snr)));
        }
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(Error::Argument(format!("pixel_size must be positive, got {}", self.pixel_size)));
        }
        if !(self.t_max.is_finite() && self.t_max >= 0.0) {
            return Err(Error::Argument(format!("t_max must be non-negative, got {}", self.t_max)));
        }
        let r = &self.ctf_ranges;
        let ordered = |p: (f64, f64)| p.0.is_finite() && p.1.is_finite() && p.0 <= p.1;
        if !(ordered(r.defocus) && ordered(r.astigmatism) && r.astigmatism.0 >= 0.0) {
            return Err(Error::Argument("ctf ranges must be finite, ordered, astigmatism >= 0".into()));
        }
        if !(0.0..1.0).contains(&r.amp_contrast) {
            return Err(Error::Argument(format!("amp_contrast {} outside [0, 1)", r.amp_contrast)));
        }
        if !(r.voltage > 0.0 && r.cs.is_finite() && r.phase_shift.is_finite() && r.b_factor.is_finite()) {
            return Err(Error::Argument("ctf constants must be finite with voltage > 0".into()));
        }
        Ok(())
    }
}

mod maybe_inf {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

/// What is needed to regenerate the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub structure_count: usize,
    pub noise_sigma: f64,
    pub config: SimulateConfig,
    pub phantoms: Vec<PhantomSpec>,
    /// `order[i]` is the pre-shuffle particle index of image `i`.
    pub order: Vec<usize>,
    #[serde(default)]
    pub files: DatasetFiles,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFiles {
    pub stack: String,
    pub metadata: String,
    pub volumes: Vec<String>,
}

/// Simulated particle images with their ground-truth acquisition parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleDataset {
    pub size: usize,
    pub pixel_size: f64,
    pub snr: f64,
    /// `N·D·D`, image-major, `[y][x]` within an image.
    pub images: Vec<f32>,
    pub poses: Vec<Pose>,
    pub ctfs: Vec<CtfParams>,
    pub structure_ids: Vec<usize>,
    pub manifest: DatasetManifest,
}

impl ParticleDataset {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn structure_count(&self) -> usize {
        self.manifest.structure_count
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&v| v as f64).collect()
    }

    /// Image indices belonging to structure `s`, in dataset order.
    pub fn indices_of(&self, s: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.structure_ids[i] == s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let dd = self.size * self.size;
        if self.images.len() != n * dd || self.ctfs.len() != n || self.structure_ids.len() != n {
            return Err(Error::Contract(format!(
                "dataset arrays disagree: {} images, {} poses, {} ctfs, {} labels",
                self.images.len() / dd.max(1),
                n,
                self.ctfs.len(),
                self.structure_ids.len()
            )));
        }
        let s = self.structure_count();
        let mut seen = vec![false; s];
        for &id in &self.structure_ids {
            if id >= s {
                return Err(Error::Contract(format!("structure id {id} outside [0, {s})")));
            }
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|&b| !b) {
            return Err(Error::Contract(format!("structure id {missing} has no images")));
        }
        for (i, p) in self.poses.iter().enumerate() {
            p.rotation.validate().map_err(|e| Error::Contract(format!("pose {i}: {e}")))?;
            if !self.ctfs[i].is_finite() {
                return Err(Error::NonFinite { what: "ctf".into(), index: i });
            }
        }
        Ok(())
    }
}

/// Noise-free CTF-filtered projection of `phantom` under `pose`.
pub fn clean_image(phantom: &VoxelVolume, pose: &Pose, ctf: &CtfParams, pixel_size: f64) -> Result<Vec<f64>> {
    let d = phantom.size;
    let proj = real_project(phantom, &pose.rotation)?;
    let mut h = hartley_2d(&proj, d, pixel_size)?;
    let c = ctf_evaluate(ctf, d, pixel_size);
    h.values.iter_mut().zip(&c).for_each(|(v, c)| *v *= c);
    if pose.shift != (0.0, 0.0) {
        h = phase_shift_center(&h, (-pose.shift.0, -pose.shift.1));
    }
    inverse_hartley_2d(&h)
}

/// Pose and CTF of pre-shuffle particle `src`.
pub fn particle_params(seed: u64, src: usize, cfg: &SimulateConfig) -> (Pose, CtfParams) {
    let mut r = rng::stream(seed, src as u64 + 1);
    let pose = sample_pose(&mut r, cfg.t_max);
    let ctf = if cfg.ctf {
        sample_ctf(&mut r, &cfg.ctf_ranges)
    } else {
        CtfParams::identity()
    };
    (pose, ctf)
}

fn noise_seed(seed: u64) -> u64 {
    rng::derive(seed, 0x6e6f697365)
}

/// Adds the white noise of pre-shuffle particle `src` to `img`.
pub fn add_particle_noise(img: &mut [f64], seed: u64, src: usize, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    let mut r = rng::stream(noise_seed(seed), src as u64);
    for v in img.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut r);
        *v += sigma * e;
    }
}

/// Simulates `n_per` images of every phantom and returns the dataset with
/// the clean images (dataset order).
pub fn simulate_with_clean(
    phantoms: &[VoxelVolume],
    cfg: &SimulateConfig,
    seed: u64,
) -> Result<(ParticleDataset, Vec<f64>)> {
    cfg.validate()?;
    let first = phantoms
        .first()
        .ok_or_else(|| Error::Argument("at least one phantom is required".into()))?;
    let d = first.size;
    if let Some(p) = phantoms.iter().find(|p| p.size != d) {
        return Err(Error::UnsupportedSize(format!(
            "phantom sizes differ: {} and {}",
            d, p.size
        )));
    }
    let s = phantoms.len();
    let total = s * cfg.n_per;
    let dd = d * d;

    let particles: Vec<(Pose, CtfParams, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|src| {
            let (pose, ctf) = particle_params(seed, src, cfg);
            let img = clean_image(&phantoms[src / cfg.n_per], &pose, &ctf, cfg.pixel_size)?;
            Ok((pose, ctf, img))
        })
        .collect::<Result<_>>()?;

    let (mut sum, mut sq) = (0.0, 0.0);
    for (_, _, img) in &particles {
        for &v in img {
            sum += v;
            sq += v * v;
        }
    }
    let count = (total * dd) as f64;
    let mean = sum / count;
    let var = (sq / count - mean * mean).max(0.0);
    let sigma = if cfg.snr.is_infinite() { 0.0 } else { (var / cfg.snr).sqrt() };

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::stream(seed, 0));

    let noisy: Vec<Vec<f64>> = particles
        .par_iter()
        .enumerate()
        .map(|(src, (_, _, img))| {
            let mut x = img.clone();
            add_particle_noise(&mut x, seed, src, sigma);
            x
        })
        .collect();

    let mut images = Vec::with_capacity(total * dd);
    let mut clean = Vec::with_capacity(total * dd);
    let mut poses = Vec::with_capacity(total);
    let mut ctfs = Vec::with_capacity(total);
    let mut structure_ids = Vec::with_capacity(total);
    for &src in &order {
        images.extend(noisy[src].iter().map(|&v| v as f32));
        clean.extend_from_slice(&particles[src].2);
        poses.push(particles[src].0);
        ctfs.push(particles[src].1);
        structure_ids.push(src / cfg.n_per);
    }

    let ds = ParticleDataset {
        size: d,
        pixel_size: cfg.pixel_size,
        snr: cfg.snr,
        images,
        poses,
        ctfs,
        structure_ids,
        manifest: DatasetManifest {
            seed,
            size: d,
            structure_count: s,
            noise_sigma: sigma,
            config: cfg.clone(),
            phantoms: Vec::new(),
            order,
            files: DatasetFiles::default(),
        },
    };
    Ok((ds, clean))
}

pub fn simulate_dataset(phantoms: &[VoxelVolume], cfg: &SimulateConfig, seed: u64) -> Result<ParticleDataset> {
    simulate_with_clean(phantoms, cfg, seed).map(|(ds, _)| ds)
}

#[cfg(test)]
mod tests;
