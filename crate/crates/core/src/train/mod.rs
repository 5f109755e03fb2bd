//! Training loop, optimizer and inference utilities.

mod adam;
#[cfg(test)]
mod tests;

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{hartley_2d, inverse_hartley_3d, phase_shift_center, HartleyImage, HartleyVolume};
use crate::hypenet::{HypeNet, HypeNetConfig};
use crate::phantom::VoxelVolume;
use crate::rng;
use crate::simulate::{ctf_evaluate, ParticleDataset};
use crate::tensor::{checkpoint, Real, Tape, Tensor};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            lr: 1e-3,
            warmup_epochs: 5,
            epochs: 100,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch == 0 {
            bad.push("train.batch must be at least 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bad.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.warmup_epochs >= self.epochs {
            bad.push(format!(
                "train.warmup_epochs {} must be below train.epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                bad.push(format!("train.grad_clip must be positive, got {c}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs;
    if epoch < w {
        return cfg.lr * epoch as f64 / w as f64;
    }
    let span = cfg.epochs.saturating_sub(1 + w);
    let progress = if span == 0 {
        0.0
    } else {
        ((epoch - w) as f64 / span as f64).min(1.0)
    };
    cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Mean squared difference over the points where `mask` is set.
pub fn masked_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape(
            "masked_mse",
            format!("{} predictions, {} targets, {} mask entries", pred.len(), target.len(), mask.len()),
        ));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..pred.len() {
        if mask[i] {
            s += (pred[i] - target[i]).powi(2);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Hartley transform of dataset image `i`, recentred by its recorded shift.
pub fn centered_hartley(ds: &ParticleDataset, i: usize) -> Result<HartleyImage> {
    let h = hartley_2d(&ds.image_f64(i), ds.size, ds.pixel_size)?;
    let t = ds.poses[i].shift;
    Ok(if t == (0.0, 0.0) { h } else { phase_shift_center(&h, t) })
}

/// Per-image tensors in the model's scaled units.
struct Prepared<T> {
    n: usize,
    tokens: usize,
    patch_len: usize,
    patches: Vec<T>,
    coords: Vec<T>,
    ctf: Vec<T>,
    target: Vec<T>,
}

/// RMS of the in-disk Hartley values over the whole dataset.
pub fn data_scale(ds: &ParticleDataset) -> Result<f64> {
    let mask = crate::fourier::disk_mask(ds.size);
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..ds.len() {
        let h = centered_hartley(ds, i)?;
        for (v, &m) in h.values.iter().zip(&mask) {
            if m {
                s += v * v;
                n += 1;
            }
        }
    }
    let rms = (s / n.max(1) as f64).sqrt();
    Ok(if rms > 0.0 { rms } else { 1.0 })
}

fn prepare<T: Real>(model: &HypeNet<T>, ds: &ParticleDataset) -> Result<Prepared<T>> {
    if ds.size != model.cfg.size {
        return Err(Error::Config(format!(
            "model.size {} does not match dataset image size {}",
            model.cfg.size, ds.size
        )));
    }
    let inv = 1.0 / model.data_scale();
    let mut p = Prepared {
        n: 0,
        tokens: model.cfg.image_tokens(),
        patch_len: model.cfg.patch * model.cfg.patch,
        patches: Vec::new(),
        coords: Vec::new(),
        ctf: Vec::new(),
        target: Vec::new(),
    };
    for i in 0..ds.len() {
        let h = centered_hartley(ds, i)?;
        p.patches.extend_from_slice(model.patches(&h)?.data());
        let (coords, idx) = model.slice_coords(&ds.poses[i].rotation)?;
        p.n = idx.len();
        p.coords.extend_from_slice(coords.data());
        let c = ctf_evaluate(&ds.ctfs[i], ds.size, ds.pixel_size);
        p.ctf.extend(idx.iter().map(|&j| T::of(c[j])));
        p.target.extend(idx.iter().map(|&j| T::of(h.values[j] * inv)));
    }
    Ok(p)
}

fn gather<T: Real>(src: &[T], per: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(per * idx.len());
    for &i in idx {
        out.extend_from_slice(&src[i * per..(i + 1) * per]);
    }
    out
}

/// Masked MSE and parameter gradients (store order) for one batch.
fn batch_step<T: Real>(
    model: &HypeNet<T>,
    data: &Prepared<T>,
    idx: &[usize],
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let b = idx.len();
    let n = data.n;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let x = tape.constant(Tensor::new(
        vec![b, data.tokens, data.patch_len],
        gather(&data.patches, data.tokens * data.patch_len, idx),
    )?);
    let c = tape.constant(Tensor::new(vec![b, n, 3], gather(&data.coords, n * 3, idx))?);
    let y = model.predict(&mut tape, &vars, x, c)?;
    let k = tape.constant(Tensor::new(vec![b, n], gather(&data.ctf, n, idx))?);
    let y = tape.mul(y, k)?;
    let t = tape.constant(Tensor::new(vec![b, n], gather(&data.target, n, idx))?);
    let r = tape.sub(y, t)?;
    let sq = tape.mul(r, r)?;
    let loss = tape.mean(sq);
    let value = tape.value(loss).data()[0].f64();
    let mut g = tape.backward(loss)?;
    let grads = vars.iter().map(|&v| g.take(v)).collect();
    Ok((value, grads))
}

fn clip<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub model: HypeNet<T>,
    pub adam: AdamState<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Sidecar describing a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub model: HypeNetConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub model_seed: u64,
}

pub const LOSS_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.cfts";

impl<T: Real> TrainState<T> {
    /// Fresh model and optimizer with the data scale fitted to `ds`.
    pub fn init(ds: &ParticleDataset, model_cfg: &HypeNetConfig, cfg: &TrainConfig) -> Result<Self> {
        let mut model = HypeNet::new(model_cfg.clone(), cfg.seed)?;
        model.set_data_scale(data_scale(ds)?)?;
        let adam = AdamState::new(&model.params);
        Ok(TrainState {
            model,
            adam,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let mut arrays: Vec<(String, &Tensor<T>)> = self.model.params.named();
        let names: Vec<String> = arrays.iter().map(|(n, _)| n.clone()).collect();
        for (i, n) in names.iter().enumerate() {
            arrays.push((format!("adam.m.{n}"), &self.adam.m[i]));
            arrays.push((format!("adam.v.{n}"), &self.adam.v[i]));
        }
        let step = Tensor::from_vec(vec![T::of(self.adam.step as f64)]);
        arrays.push(("adam.step".into(), &step));
        checkpoint::save(path, &arrays)?;
        let info = CheckpointInfo {
            model: self.model.cfg.clone(),
            train: cfg.clone(),
            epoch: self.epoch,
            model_seed: cfg.seed,
        };
        let side = sidecar(path);
        fs::write(&side, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| Error::io(&side, e))
    }

    /// Restores model, optimizer and epoch counter; the loss log is read
    /// from `loss.csv` next to the checkpoint when present.
    pub fn load(path: &Path) -> Result<(Self, CheckpointInfo)> {
        let info = read_info(path)?;
        let arrays = checkpoint::load::<T>(path)?;
        let mut model = HypeNet::new(info.model.clone(), info.model_seed)?;
        model.params.load_named(&arrays)?;
        let mut adam = AdamState::new(&model.params);
        let lookup: std::collections::HashMap<&str, &Tensor<T>> =
            arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, p) in model.params.iter().enumerate() {
            if let (Some(m), Some(v)) = (
                lookup.get(format!("adam.m.{}", p.name).as_str()),
                lookup.get(format!("adam.v.{}", p.name).as_str()),
            ) {
                adam.m[i] = (*m).clone();
                adam.v[i] = (*v).clone();
            }
        }
        if let Some(s) = lookup.get("adam.step") {
            adam.step = s.data()[0].f64() as u64;
        }
        let mut log = Vec::new();
        if let Some(dir) = path.parent() {
            let lp = dir.join(LOSS_FILE);
            if lp.exists() {
                log = read_loss_log(&lp)?;
                log.truncate(info.epoch);
            }
        }
        Ok((
            TrainState {
                model,
                adam,
                epoch: info.epoch,
                log,
            },
            info,
        ))
    }
}

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn read_info(path: &Path) -> Result<CheckpointInfo> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_loss_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Trains from `state` until `cfg.epochs` epochs are complete. With an
/// output directory the loss log is rewritten every epoch and checkpoints
/// follow `cfg.checkpoint_every` plus a final `model.cfts`.
pub fn train<T: Real>(
    ds: &ParticleDataset,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<()> {
    train_until(ds, state, cfg, cfg.epochs, out_dir)
}

/// [`train`] that stops once `stop` epochs are complete, keeping the
/// schedule of the full run.
pub fn train_until<T: Real>(
    ds: &ParticleDataset,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    stop: usize,
    out_dir: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let stop = stop.min(cfg.epochs);
    ds.validate()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let data = prepare(&state.model, ds)?;
    let n_img = ds.len();
    while state.epoch < stop {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..n_img).collect();
        order.shuffle(&mut rng::stream(rng::derive(cfg.seed, 0x7472), epoch as u64));
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let (loss, mut grads) = batch_step(&state.model, &data, idx)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss at epoch {epoch} batch {bi}"),
                    index: bi,
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            adam_step(&mut state.model.params, &grads, &mut state.adam, lr)?;
            total += loss * idx.len() as f64;
        }
        let mean_loss = total / n_img as f64;
        state.epoch += 1;
        state.log.push(EpochLog { epoch, mean_loss, lr });
        info!("epoch {epoch} loss {mean_loss:.6e} lr {lr:.3e}");
        if let Some(d) = out_dir {
            write_loss_log(&state.log, &d.join(LOSS_FILE))?;
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                state.save(&d.join(format!("checkpoint_{:04}.cfts", state.epoch)), cfg)?;
            }
        }
    }
    if let Some(d) = out_dir {
        write_loss_log(&state.log, &d.join(LOSS_FILE))?;
        state.save(&d.join(FINAL_CHECKPOINT), cfg)?;
    }
    Ok(())
}

/// Volume for the structure seen in `img`: the INR evaluated on every
/// `d_out³` lattice point with `|k| <= 0.5`, inverse transformed, and
/// masked to a ball of radius `d_out/2`.
pub fn reconstruct_volume<T: Real>(model: &HypeNet<T>, img: &HartleyImage, d_out: usize) -> Result<VoxelVolume> {
    if d_out == 0 || d_out % 2 != 0 {
        return Err(Error::UnsupportedSize(format!("output side must be even, got {d_out}")));
    }
    let d = model.cfg.size;
    let h = (d_out / 2) as f64;
    let mut coords = Vec::new();
    let mut idx = Vec::new();
    for z in 0..d_out {
        for y in 0..d_out {
            for x in 0..d_out {
                let k = [(x as f64 - h) / d as f64, (y as f64 - h) / d as f64, (z as f64 - h) / d as f64];
                if k[0] * k[0] + k[1] * k[1] + k[2] * k[2] <= 0.25 {
                    coords.push(k);
                    idx.push((z * d_out + y) * d_out + x);
                }
            }
        }
    }
    let vals = model.eval_coords(img, &coords, 4096)?;
    let gain = (d_out as f64 / d as f64).powi(3);
    let mut values = vec![0.0; d_out * d_out * d_out];
    for (&i, v) in idx.iter().zip(vals) {
        values[i] = v * gain;
    }
    let voxel_size = img.pixel_size * d as f64 / d_out as f64;
    let mut vol = inverse_hartley_3d(&HartleyVolume {
        size: d_out,
        values,
        voxel_size,
    })?;
    vol.apply_spherical_mask(h);
    Ok(vol)
}

/// Flattened weight tokens of every image, rows in dataset order.
pub fn extract_latents<T: Real>(model: &HypeNet<T>, ds: &ParticleDataset) -> Result<Vec<Vec<f64>>> {
    let t = model.cfg.image_tokens();
    let pl = model.cfg.patch * model.cfg.patch;
    let mut rows = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * t * pl);
        for &i in chunk {
            data.extend_from_slice(model.patches(&centered_hartley(ds, i)?)?.data());
        }
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![chunk.len(), t, pl], data)?);
        let tokens = model.tokenize(&mut tape, &vars, x)?;
        let (_, wf) = model.encode(&mut tape, &vars, tokens)?;
        let w = tape.value(wf).data();
        let per = w.len() / chunk.len();
        for r in 0..chunk.len() {
            rows.push(w[r * per..(r + 1) * per].iter().map(|v| v.f64()).collect());
        }
    }
    Ok(rows)
}

/// Writes a latent matrix as CSV with columns `w0..`.
pub fn write_latents(rows: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let cols = rows.first().map_or(0, |r| r.len());
    let header: Vec<String> = (0..cols).map(|c| format!("w{c}")).collect();
    writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
