use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Weight tokens modulate every INR layer.
    Hypernet,
    /// The last weight token becomes a latent vector appended to the INR input.
    Concat,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "hypernet" => Ok(Mode::Hypernet),
            "concat" => Ok(Mode::Concat),
            other => Err(Error::Config(format!("model.mode: unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypeNetConfig {
    /// Image side D.
    pub size: usize,
    /// Patch side P.
    pub patch: usize,
    /// Token width d.
    pub embed_dim: usize,
    /// Transformer blocks.
    pub blocks: usize,
    pub heads: usize,
    /// Weight-token group sizes a_1..a_L, one group per INR layer.
    pub groups: Vec<usize>,
    /// INR hidden width h.
    pub hidden: usize,
    /// Fourier feature count m.
    pub pe_freqs: usize,
    /// Standard deviation of the Fourier feature matrix, in voxels.
    pub pe_sigma: f64,
    /// Gaussian low-pass radius (Fourier pixels) applied to input images.
    pub lowpass_cutoff: Option<f64>,
    pub mode: Mode,
    /// Latent width in concat mode.
    pub latent_dim: usize,
}

impl Default for HypeNetConfig {
    fn default() -> Self {
        HypeNetConfig {
            size: 32,
            patch: 4,
            embed_dim: 128,
            blocks: 4,
            heads: 4,
            groups: vec![2; 5],
            hidden: 64,
            pe_freqs: 64,
            pe_sigma: 2.0,
            lowpass_cutoff: None,
            mode: Mode::Hypernet,
            latent_dim: 8,
        }
    }
}

impl HypeNetConfig {
    /// INR layer count L.
    pub fn layers(&self) -> usize {
        self.groups.len()
    }

    /// Weight-token count q.
    pub fn weight_tokens(&self) -> usize {
        self.groups.iter().sum()
    }

    /// Image-token count T.
    pub fn image_tokens(&self) -> usize {
        let s = self.size / self.patch;
        s * s
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// `(fan_in, fan_out)` of INR layer `j`.
    pub fn layer_shape(&self, j: usize) -> (usize, usize) {
        let l = self.layers();
        let first_in = 2 * self.pe_freqs
            + match self.mode {
                Mode::Hypernet => 0,
                Mode::Concat => self.latent_dim,
            };
        let fan_in = if j == 0 { first_in } else { self.hidden };
        let fan_out = if j + 1 == l { 1 } else { self.hidden };
        (fan_in, fan_out)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.size == 0 || self.size % 2 != 0 {
            bad.push(format!("model.size must be even and positive, got {}", self.size));
        }
        if self.patch == 0 || self.size % self.patch.max(1) != 0 {
            bad.push(format!("model.patch {} must divide model.size {}", self.patch, self.size));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads.max(1) != 0 {
            bad.push(format!(
                "model.heads {} must divide model.embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        if self.groups.len() < 2 {
            bad.push("model.groups needs at least two INR layers".to_string());
        }
        if self.groups.contains(&0) {
            bad.push("model.groups entries must be positive".to_string());
        }
        if self.hidden == 0 || self.pe_freqs == 0 || self.latent_dim == 0 {
            bad.push("model.hidden, model.pe_freqs and model.latent_dim must be positive".to_string());
        }
        if !(self.pe_sigma.is_finite() && self.pe_sigma > 0.0) {
            bad.push(format!("model.pe_sigma must be positive, got {}", self.pe_sigma));
        }
        if let Some(c) = self.lowpass_cutoff {
            if c.is_nan() || c <= 0.0 {
                bad.push(format!("model.lowpass_cutoff must be positive, got {c}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
