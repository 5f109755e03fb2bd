//! Contrast transfer function of a transmission electron microscope.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::fourier::freq_of;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    /// Å, `defocus_u >= defocus_v`.
    pub defocus_u: f64,
    pub defocus_v: f64,
    /// rad
    pub astig_angle: f64,
    /// kV
    pub voltage: f64,
    /// mm
    pub cs: f64,
    pub amp_contrast: f64,
    /// rad
    pub phase_shift: f64,
    /// Å²
    pub b_factor: f64,
}

impl CtfParams {
    /// Parameters whose CTF is exactly 1 at every frequency
    /// (zero defocus and aberration, pure −π/2 phase plate).
    pub fn identity() -> CtfParams {
        CtfParams {
            defocus_u: 0.0,
            defocus_v: 0.0,
            astig_angle: 0.0,
            voltage: 300.0,
            cs: 0.0,
            amp_contrast: 0.0,
            phase_shift: -FRAC_PI_2,
            b_factor: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.defocus_u,
            self.defocus_v,
            self.astig_angle,
            self.voltage,
            self.cs,
            self.amp_contrast,
            self.phase_shift,
            self.b_factor,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Relativistic electron wavelength in Å.
    pub fn wavelength(&self) -> f64 {
        let v = self.voltage * 1e3;
        12.2639 / (v + 0.97845e-6 * v * v).sqrt()
    }

    /// Phase aberration χ at spatial frequency `(sx, sy)` in 1/Å.
    pub fn chi(&self, sx: f64, sy: f64) -> f64 {
        let lambda = self.wavelength();
        let s2 = sx * sx + sy * sy;
        let theta = sy.atan2(sx);
        let z = 0.5 * (self.defocus_u + self.defocus_v)
            + 0.5 * (self.defocus_u - self.defocus_v) * (2.0 * (theta - self.astig_angle)).cos();
        let cs = self.cs * 1e7;
        PI * lambda * z * s2 - FRAC_PI_2 * cs * lambda.powi(3) * s2 * s2 + self.phase_shift
    }

    /// CTF value at spatial frequency `(sx, sy)` in 1/Å.
    pub fn eval(&self, sx: f64, sy: f64) -> f64 {
        let w = self.amp_contrast;
        let chi = self.chi(sx, sy);
        let s2 = sx * sx + sy * sy;
        let env = if self.b_factor == 0.0 {
            1.0
        } else {
            (-self.b_factor * s2 / 4.0).exp()
        };
        -((1.0 - w * w).sqrt() * chi.sin() + w * chi.cos()) * env
    }
}

/// CTF over a centered `d×d` frequency lattice with the given pixel size (Å).
pub fn ctf_evaluate(p: &CtfParams, d: usize, pixel_size: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(d * d);
    for y in 0..d {
        for x in 0..d {
            out.push(p.eval(freq_of(x, d) / pixel_size, freq_of(y, d) / pixel_size));
        }
    }
    out
}

/// Uniform sampling ranges for per-image CTF parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtfRanges {
    /// Mean defocus range, Å.
    pub defocus: (f64, f64),
    /// Range of `defocus_u - defocus_v`, Å.
    pub astigmatism: (f64, f64),
    pub voltage: f64,
    pub cs: f64,
    pub amp_contrast: f64,
    pub phase_shift: f64,
    pub b_factor: f64,
}

impl Default for CtfRanges {
    fn default() -> Self {
        CtfRanges {
            defocus: (10_000.0, 20_000.0),
            astigmatism: (0.0, 500.0),
            voltage: 300.0,
            cs: 2.7,
            amp_contrast: 0.1,
            phase_shift: 0.0,
            b_factor: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> CtfParams {
        CtfParams {
            defocus_u: 15_000.0,
            defocus_v: 15_000.0,
            astig_angle: 0.3,
            voltage: 300.0,
            cs: 2.7,
            amp_contrast: 0.1,
            phase_shift: 0.0,
            b_factor: 50.0,
        }
    }

    #[test]
    fn dc_value_is_minus_amplitude_contrast() {
        let p = base();
        assert_eq!(p.eval(0.0, 0.0), -0.1);
    }

    #[test]
    fn wavelength_at_300kv() {
        assert!((base().wavelength() - 0.019687).abs() < 1e-5);
    }

    #[test]
    fn vanishes_at_first_zero_of_chi() {
        let mut p = base();
        p.amp_contrast = 0.0;
        p.b_factor = 0.0;
        // χ(s) = a s² - b s⁴ = π  ->  solve for s²
        let lambda = p.wavelength();
        let a = PI * lambda * p.defocus_u;
        let b = FRAC_PI_2 * p.cs * 1e7 * lambda.powi(3);
        let s2 = (a - (a * a - 4.0 * b * PI).sqrt()) / (2.0 * b);
        let s = s2.sqrt();
        assert!(p.eval(s, 0.0).abs() < 1e-9);
        assert!(p.eval(0.6 * s, 0.8 * s).abs() < 1e-9);
    }

    #[test]
    fn astigmatism_free_ctf_is_radially_symmetric() {
        let d = 32;
        let p = base();
        let c = ctf_evaluate(&p, d, 6.0);
        let h = (d / 2) as isize;
        let at = |kx: isize, ky: isize| c[((ky + h) as usize) * d + (kx + h) as usize];
        for ky in 1 - h..h {
            for kx in 1 - h..h {
                let (a, b) = (at(kx, ky), at(-ky, kx));
                assert!((a - b).abs() < 1e-12, "{a} {b}");
            }
        }
    }

    #[test]
    fn identity_params_give_unit_ctf() {
        let c = ctf_evaluate(&CtfParams::identity(), 16, 3.0);
        assert!(c.iter().all(|&v| v == 1.0));
    }
}
