//! Transformer hypernetwork over Hartley-domain images and the implicit
//! neural representation it modulates.
//!
//! Image patches and `q` learnable weight tokens pass through a pre-norm
//! transformer. The weight tokens are split into one group per INR layer;
//! a linear head maps each group to a modulation that is column-normalized
//! and multiplied into that layer's shared base weights. The INR maps
//! Fourier features of a 3D frequency coordinate to a Hartley amplitude.
//!
//! In concat mode the heads are replaced by one linear map from the last
//! weight token to a latent vector appended to every INR input.

mod config;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fourier::{rotated_slice_coords, HartleyImage, Rotation};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub use config::{HypeNetConfig, Mode};

/// Added to column norms inside [`HypeNet::norm`].
pub const NORM_EPS: f64 = 1e-8;
const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct BlockIds {
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    mlp1_w: ParamId,
    mlp1_b: ParamId,
    mlp2_w: ParamId,
    mlp2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    wtok: Vec<ParamId>,
    theta: Vec<ParamId>,
    bias: Vec<ParamId>,
    /// `(w, b)` per INR layer, or a single latent head in concat mode.
    heads: Vec<(ParamId, ParamId)>,
    pe: ParamId,
    scale: ParamId,
}

/// Per-image conditioning of the INR.
pub enum Conditioning {
    /// Effective weights `θ^F_j`, each `[B, fan_in, fan_out]`.
    Modulated(Vec<Var>),
    /// Latent `[B, latent_dim]`.
    Latent(Var),
}

/// The model: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct HypeNet<T: Real> {
    pub cfg: HypeNetConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

fn randn<T: Real>(shape: &[usize], std: f64, r: &mut rng::Rng) -> Tensor<T> {
    Tensor::randn(shape, std, r)
}

impl<T: Real> HypeNet<T> {
    /// Freshly initialized model; identical seeds give bit-identical parameters.
    pub fn new(cfg: HypeNetConfig, seed: u64) -> Result<HypeNet<T>> {
        cfg.validate()?;
        let mut r = rng::stream(seed, 0x6879_7065);
        let mut p = ParamStore::new();
        let d = cfg.embed_dim;
        let pp = cfg.patch * cfg.patch;
        let t = cfg.image_tokens();

        let embed_w = p.push("encoder.embed.w", randn(&[pp, d], (1.0 / pp as f64).sqrt(), &mut r), true);
        let embed_b = p.push("encoder.embed.b", Tensor::zeros(&[d]), true);
        let pos = p.push("encoder.pos", randn(&[t, d], 0.02, &mut r), true);
        let inv = (1.0 / d as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = |s: &str| format!("encoder.block{i}.{s}");
                BlockIds {
                    qkv_w: p.push(n("attn.qkv.w"), randn(&[d, 3 * d], inv, &mut r), true),
                    qkv_b: p.push(n("attn.qkv.b"), Tensor::zeros(&[3 * d]), true),
                    out_w: p.push(n("attn.out.w"), randn(&[d, d], inv, &mut r), true),
                    out_b: p.push(n("attn.out.b"), Tensor::zeros(&[d]), true),
                    mlp1_w: p.push(n("mlp.fc1.w"), randn(&[d, 4 * d], inv, &mut r), true),
                    mlp1_b: p.push(n("mlp.fc1.b"), Tensor::zeros(&[4 * d]), true),
                    mlp2_w: p.push(n("mlp.fc2.w"), randn(&[4 * d, d], inv * 0.5, &mut r), true),
                    mlp2_b: p.push(n("mlp.fc2.b"), Tensor::zeros(&[d]), true),
                }
            })
            .collect();
        let wtok = (0..cfg.weight_tokens())
            .map(|i| p.push(format!("wtok.{i}"), randn(&[d], 0.02, &mut r), true))
            .collect();

        let l = cfg.layers();
        let mut theta = Vec::with_capacity(l);
        let mut bias = Vec::with_capacity(l);
        for j in 0..l {
            let (fi, fo) = cfg.layer_shape(j);
            let std = if j == 0 {
                (2.0 / fi as f64).sqrt()
            } else {
                (1.0 / fi as f64).sqrt()
            };
            theta.push(p.push(format!("inr.theta{j}"), randn(&[fi, fo], std, &mut r), true));
            bias.push(p.push(format!("inr.bias{j}"), Tensor::zeros(&[fo]), true));
        }

        let heads = match cfg.mode {
            Mode::Hypernet => (0..l)
                .map(|j| {
                    let (fi, fo) = cfg.layer_shape(j);
                    let w = p.push(
                        format!("head.{j}.w"),
                        randn(&[cfg.groups[j] * d, fi * fo], HEAD_INIT_STD, &mut r),
                        true,
                    );
                    let b = p.push(format!("head.{j}.b"), Tensor::zeros(&[fi * fo]), true);
                    (w, b)
                })
                .collect(),
            Mode::Concat => {
                let w = p.push("head.0.w", randn(&[d, cfg.latent_dim], HEAD_INIT_STD, &mut r), true);
                let b = p.push("head.0.b", Tensor::zeros(&[cfg.latent_dim]), true);
                vec![(w, b)]
            }
        };

        let pe = p.push("pe.B", randn(&[cfg.pe_freqs, 3], cfg.pe_sigma, &mut r), false);
        let scale = p.push("data.scale", Tensor::from_vec(vec![T::one()]), false);

        Ok(HypeNet {
            cfg,
            params: p,
            ids: Ids {
                embed_w,
                embed_b,
                pos,
                blocks,
                wtok,
                theta,
                bias,
                heads,
                pe,
                scale,
            },
        })
    }

    /// Amplitude scale dividing Hartley data before it enters the model.
    pub fn data_scale(&self) -> f64 {
        self.params.get(self.ids.scale).value.data()[0].f64()
    }

    pub fn set_data_scale(&mut self, s: f64) -> Result<()> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Argument(format!("data scale must be positive, got {s}")));
        }
        self.params.get_mut(self.ids.scale).value = Tensor::from_vec(vec![T::of(s)]);
        Ok(())
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    // ------------------------------------------------------------- inputs

    /// Scaled, optionally low-passed Hartley values cut into `T` flattened
    /// `P×P` patches, row-major over the patch grid: `[T, P²]`.
    pub fn patches(&self, img: &HartleyImage) -> Result<Tensor<T>> {
        let d = self.cfg.size;
        let p = self.cfg.patch;
        if img.size != d || img.values.len() != d * d {
            return Err(Error::shape(
                "patches",
                format!("image side {} differs from model side {d}", img.size),
            ));
        }
        let inv = 1.0 / self.data_scale();
        let h = (d / 2) as f64;
        let lowpass = |x: usize, y: usize| match self.cfg.lowpass_cutoff {
            Some(c) => {
                let r2 = (x as f64 - h).powi(2) + (y as f64 - h).powi(2);
                (-r2 / (2.0 * c * c)).exp()
            }
            None => 1.0,
        };
        let s = d / p;
        let mut out = Vec::with_capacity(d * d);
        for py in 0..s {
            for px in 0..s {
                for y in py * p..(py + 1) * p {
                    for x in px * p..(px + 1) * p {
                        out.push(T::of(img.values[y * d + x] * inv * lowpass(x, y)));
                    }
                }
            }
        }
        Tensor::new(vec![s * s, p * p], out)
    }

    /// In-disk frequency coordinates of the slice at `rot`: `[n, 3]`, plus
    /// their pixel indices.
    pub fn slice_coords(&self, rot: &Rotation) -> Result<(Tensor<T>, Vec<usize>)> {
        let lat = rotated_slice_coords(rot, self.cfg.size)?;
        let idx = lat.band_indices();
        let data = idx
            .iter()
            .flat_map(|&i| lat.coords[i].map(T::of))
            .collect();
        Ok((Tensor::new(vec![idx.len(), 3], data)?, idx))
    }

    // ------------------------------------------------------------- graph

    fn v(vars: &[Var], id: ParamId) -> Var {
        vars[id.0]
    }

    /// Patch embedding plus positional embedding: `[B,T,P²] -> [B,T,d]`.
    pub fn tokenize(&self, tape: &mut Tape<'_, T>, vars: &[Var], patches: Var) -> Result<Var> {
        let x = tape.matmul(patches, Self::v(vars, self.ids.embed_w))?;
        let x = tape.add(x, Self::v(vars, self.ids.embed_b))?;
        tape.add(x, Self::v(vars, self.ids.pos))
    }

    /// Runs image tokens `[B,T,d]` and the weight tokens through the
    /// encoder; returns `(t^F [B,T,d], w^F [B,q,d])`.
    pub fn encode(&self, tape: &mut Tape<'_, T>, vars: &[Var], tokens: Var) -> Result<(Var, Var)> {
        let sh = tape.shape(tokens).to_vec();
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        let q = self.cfg.weight_tokens();
        let rows: Vec<Var> = self.ids.wtok.iter().map(|&id| Self::v(vars, id)).collect();
        let w = tape.concat(&rows, 0)?;
        let w = tape.reshape(w, &[q, d])?;
        let zeros = tape.constant(Tensor::zeros(&[b, q, d]));
        let w = tape.add(zeros, w)?;
        let mut x = tape.concat(&[tokens, w], 1)?;
        for blk in &self.ids.blocks {
            x = self.block(tape, vars, blk, x)?;
        }
        let tf = tape.slice(x, 1, 0, t)?;
        let wf = tape.slice(x, 1, t, t + q)?;
        Ok((tf, wf))
    }

    fn linear(&self, tape: &mut Tape<'_, T>, vars: &[Var], x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = tape.matmul(x, Self::v(vars, w))?;
        tape.add(y, Self::v(vars, b))
    }

    fn block(&self, tape: &mut Tape<'_, T>, vars: &[Var], ids: &BlockIds, x: Var) -> Result<Var> {
        let sh = tape.shape(x).to_vec();
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        let nh = self.cfg.heads;
        let dh = d / nh;

        let h = tape.layer_norm(x);
        let qkv = self.linear(tape, vars, h, ids.qkv_w, ids.qkv_b)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, nh, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut part = |i: usize| -> Result<Var> {
            let s = tape.slice(qkv, 0, i, i + 1)?;
            tape.reshape(s, &[b * nh, n, dh])
        };
        let (qh, kh, vh) = (part(0)?, part(1)?, part(2)?);
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let att = tape.softmax(scores);
        let ctx = tape.matmul(att, vh)?;
        let ctx = tape.reshape(ctx, &[b, nh, n, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        let a = self.linear(tape, vars, ctx, ids.out_w, ids.out_b)?;
        let x = tape.add(x, a)?;

        let h = tape.layer_norm(x);
        let h = self.linear(tape, vars, h, ids.mlp1_w, ids.mlp1_b)?;
        let h = tape.gelu(h);
        let h = self.linear(tape, vars, h, ids.mlp2_w, ids.mlp2_b)?;
        tape.add(x, h)
    }

    /// Column-wise L2 normalization scaled by `√fan_in`: `[B,in,out]`.
    pub fn norm(tape: &mut Tape<'_, T>, m: Var) -> Result<Var> {
        let fan_in = tape.shape(m)[1];
        let n = tape.l2_norm(m, 1)?;
        let n = tape.add_scalar(n, T::of(NORM_EPS));
        let u = tape.div(m, n)?;
        Ok(tape.scale(u, T::of((fan_in as f64).sqrt())))
    }

    /// Effective INR weights `θ^F_j = Norm(Head_j(group j)) ⊗ θ_j`, each `[B,in,out]`.
    pub fn modulate(&self, tape: &mut Tape<'_, T>, vars: &[Var], wf: Var) -> Result<Vec<Var>> {
        if self.cfg.mode != Mode::Hypernet {
            return Err(Error::Config("modulate requires model.mode = hypernet".into()));
        }
        let sh = tape.shape(wf).to_vec();
        let (b, d) = (sh[0], sh[2]);
        let mut start = 0;
        let mut out = Vec::with_capacity(self.cfg.layers());
        for (j, &a) in self.cfg.groups.iter().enumerate() {
            let g = tape.slice(wf, 1, start, start + a)?;
            start += a;
            let g = tape.reshape(g, &[b, a * d])?;
            let (hw, hb) = self.ids.heads[j];
            let m = self.linear(tape, vars, g, hw, hb)?;
            let (fi, fo) = self.cfg.layer_shape(j);
            let m = tape.reshape(m, &[b, fi, fo])?;
            let m = Self::norm(tape, m)?;
            out.push(tape.mul(m, Self::v(vars, self.ids.theta[j]))?);
        }
        Ok(out)
    }

    /// Latent vector `[B, latent_dim]` from the last weight token (concat mode).
    pub fn latent(&self, tape: &mut Tape<'_, T>, vars: &[Var], wf: Var) -> Result<Var> {
        if self.cfg.mode != Mode::Concat {
            return Err(Error::Config("latent requires model.mode = concat".into()));
        }
        let q = self.cfg.weight_tokens();
        let last = tape.slice(wf, 1, q - 1, q)?;
        let b = tape.shape(wf)[0];
        let last = tape.reshape(last, &[b, self.cfg.embed_dim])?;
        let (hw, hb) = self.ids.heads[0];
        self.linear(tape, vars, last, hw, hb)
    }

    pub fn condition(&self, tape: &mut Tape<'_, T>, vars: &[Var], wf: Var) -> Result<Conditioning> {
        match self.cfg.mode {
            Mode::Hypernet => Ok(Conditioning::Modulated(self.modulate(tape, vars, wf)?)),
            Mode::Concat => Ok(Conditioning::Latent(self.latent(tape, vars, wf)?)),
        }
    }

    /// Random Fourier features `[cos 2π𝐁k, sin 2π𝐁k]` of coords `[..., 3]`.
    pub fn encode_positions(&self, tape: &mut Tape<'_, T>, vars: &[Var], coords: Var) -> Result<Var> {
        let z = tape.matmul_bt(coords, Self::v(vars, self.ids.pe))?;
        let z = tape.scale(z, T::of(2.0 * PI));
        let c = tape.cos(z);
        let s = tape.sin(z);
        let axis = tape.shape(z).len() - 1;
        tape.concat(&[c, s], axis)
    }

    /// INR amplitudes `[B, n]` at coords `[B, n, 3]`.
    pub fn inr(&self, tape: &mut Tape<'_, T>, vars: &[Var], coords: Var, cond: &Conditioning) -> Result<Var> {
        let sh = tape.shape(coords).to_vec();
        let (b, n) = (sh[0], sh[1]);
        let mut x = self.encode_positions(tape, vars, coords)?;
        if let Conditioning::Latent(z) = cond {
            let k = tape.shape(*z)[1];
            let z = tape.reshape(*z, &[b, 1, k])?;
            let zeros = tape.constant(Tensor::zeros(&[b, n, k]));
            let z = tape.add(zeros, z)?;
            x = tape.concat(&[x, z], 2)?;
        }
        let l = self.cfg.layers();
        for j in 0..l {
            let w = match cond {
                Conditioning::Modulated(th) => th[j],
                Conditioning::Latent(_) => Self::v(vars, self.ids.theta[j]),
            };
            let y = tape.matmul(x, w)?;
            let y = tape.add(y, Self::v(vars, self.ids.bias[j]))?;
            x = if j + 1 == l {
                y
            } else if j == 0 {
                tape.relu(y)
            } else {
                let y = tape.relu(y);
                tape.add(x, y)?
            };
        }
        tape.reshape(x, &[b, n])
    }

    /// Scaled amplitudes `[B, n]` before the CTF, from patches `[B,T,P²]`
    /// and coords `[B,n,3]`.
    pub fn predict(&self, tape: &mut Tape<'_, T>, vars: &[Var], patches: Var, coords: Var) -> Result<Var> {
        let tokens = self.tokenize(tape, vars, patches)?;
        let (_, wf) = self.encode(tape, vars, tokens)?;
        let cond = self.condition(tape, vars, wf)?;
        self.inr(tape, vars, coords, &cond)
    }

    // ------------------------------------------------------- convenience

    fn batch1(&self, img: &HartleyImage) -> Result<Tensor<T>> {
        let p = self.patches(img)?;
        let s = p.shape().to_vec();
        p.reshape(&[1, s[0], s[1]])
    }

    /// Flattened weight tokens `w^F` of one image (`q·d` values).
    pub fn latent_tokens(&self, img: &HartleyImage) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = tape.constant(self.batch1(img)?);
        let tokens = self.tokenize(&mut tape, &vars, x)?;
        let (_, wf) = self.encode(&mut tape, &vars, tokens)?;
        Ok(tape.value(wf).data().iter().map(|v| v.f64()).collect())
    }

    /// Effective weights `θ^F_j` of one image, each `[in, out]` (hypernet mode).
    pub fn effective_weights(&self, img: &HartleyImage) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = tape.constant(self.batch1(img)?);
        let tokens = self.tokenize(&mut tape, &vars, x)?;
        let (_, wf) = self.encode(&mut tape, &vars, tokens)?;
        let th = self.modulate(&mut tape, &vars, wf)?;
        th.iter()
            .map(|&v| {
                let s = tape.shape(v)[1..].to_vec();
                tape.value(v).clone().reshape(&s)
            })
            .collect()
    }

    /// Hartley amplitudes (data units) at arbitrary frequency coordinates
    /// for the structure seen in `img`, evaluated in chunks.
    pub fn eval_coords(&self, img: &HartleyImage, coords: &[[f64; 3]], chunk: usize) -> Result<Vec<f64>> {
        let patches = self.batch1(img)?;
        let scale = self.data_scale();
        let mut out = Vec::with_capacity(coords.len());
        for part in coords.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape);
            let x = tape.constant(patches.clone());
            let data = part.iter().flat_map(|c| c.map(T::of)).collect();
            let c = tape.constant(Tensor::new(vec![1, part.len(), 3], data)?);
            let y = self.predict(&mut tape, &vars, x, c)?;
            out.extend(tape.value(y).data().iter().map(|v| v.f64() * scale));
        }
        Ok(out)
    }

    /// Predicted `D×D` Hartley slice at `rot`, CTF-multiplied, zero outside
    /// the frequency disk, in data units.
    pub fn forward(&self, img: &HartleyImage, rot: &Rotation, ctf: &[f64]) -> Result<Vec<f64>> {
        let d = self.cfg.size;
        if ctf.len() != d * d {
            return Err(Error::shape("forward", format!("ctf has {} values, expected {}", ctf.len(), d * d)));
        }
        let lat = rotated_slice_coords(rot, d)?;
        let idx = lat.band_indices();
        let coords: Vec<[f64; 3]> = idx.iter().map(|&i| lat.coords[i]).collect();
        let vals = self.eval_coords(img, &coords, coords.len())?;
        let mut out = vec![0.0; d * d];
        for (&i, v) in idx.iter().zip(vals) {
            out[i] = v * ctf[i];
        }
        Ok(out)
    }
}
