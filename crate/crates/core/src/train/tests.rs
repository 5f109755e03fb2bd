use super::*;
use crate::hypenet::Mode;
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::simulate::{simulate_dataset, SimulateConfig};

fn sched(w: usize, t: usize) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        warmup_epochs: w,
        epochs: t,
        ..Default::default()
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let c = sched(5, 50);
    assert_eq!(lr_schedule(0, &c), 0.0);
    assert!((lr_schedule(2, &c) - 0.8e-3).abs() < 1e-15);
    assert_eq!(lr_schedule(5, &c), 2e-3);
    assert!(lr_schedule(49, &c).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for e in 5..50 {
        let v = lr_schedule(e, &c);
        assert!(v <= prev);
        prev = v;
    }
    // continuity at the junction
    let below = c.lr * (5.0 - 1e-9) / 5.0;
    assert!((below - lr_schedule(5, &c)).abs() < 1e-11);
}

#[test]
fn config_rejects_bad_warmup() {
    assert!(matches!(sched(10, 10).validate(), Err(Error::Config(_))));
    assert!(sched(0, 1).validate().is_ok());
}

#[test]
fn masked_mse_examples() {
    let t = [1.0, -2.0, 3.0, 4.0];
    let m = [true, true, false, true];
    assert_eq!(masked_mse(&t, &t, &m).unwrap(), 0.0);
    let p: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
    assert_eq!(masked_mse(&p, &t, &m).unwrap(), 1.0);
    let a = [1.5, -2.25, 9.0, 4.5];
    let doubled: Vec<f64> = a.iter().zip(&t).map(|(x, y)| y + 2.0 * (x - y)).collect();
    let l1 = masked_mse(&a, &t, &m).unwrap();
    assert!((masked_mse(&doubled, &t, &m).unwrap() - 4.0 * l1).abs() < 1e-12);
    assert!(masked_mse(&a, &t, &m[..3]).is_err());
}

fn dataset(structures: usize, per: usize, d: usize, snr: f64, ctf: bool) -> ParticleDataset {
    let ph: Vec<_> = (0..structures)
        .map(|i| generate_phantom(&PhantomSpec::for_structure(5, i as u64, 0.5), d, 6.0).unwrap())
        .collect();
    let cfg = SimulateConfig {
        n_per: per,
        snr,
        ctf,
        ..Default::default()
    };
    simulate_dataset(&ph, &cfg, 9).unwrap()
}

fn small_model(d: usize, mode: Mode) -> HypeNetConfig {
    HypeNetConfig {
        size: d,
        patch: 4,
        embed_dim: 16,
        blocks: 1,
        heads: 2,
        groups: vec![1, 1, 1],
        hidden: 16,
        pe_freqs: 16,
        mode,
        ..Default::default()
    }
}

#[test]
fn one_step_reaches_every_parameter_group() {
    let ds = dataset(2, 4, 16, f64::INFINITY, true);
    for mode in [Mode::Hypernet, Mode::Concat] {
        let cfg = TrainConfig {
            batch: 4,
            epochs: 2,
            warmup_epochs: 1,
            ..Default::default()
        };
        let state = TrainState::<f64>::init(&ds, &small_model(16, mode), &cfg).unwrap();
        let data = prepare(&state.model, &ds).unwrap();
        let (loss, grads) = batch_step(&state.model, &data, &[0, 1, 2, 3]).unwrap();
        assert!(loss > 0.0);
        for (p, g) in state.model.params.iter().zip(&grads) {
            if p.trainable {
                let g = g.as_ref().unwrap_or_else(|| panic!("{} has no gradient", p.name));
                assert!(g.sq_norm() > 0.0, "{} has zero gradient", p.name);
            } else {
                assert!(g.is_none(), "{} is frozen", p.name);
            }
        }
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let ds = dataset(2, 6, 16, 1.0, true);
    let cfg = TrainConfig {
        batch: 4,
        epochs: 4,
        warmup_epochs: 1,
        lr: 1e-3,
        seed: 3,
        ..Default::default()
    };
    let mcfg = small_model(16, Mode::Hypernet);
    let run = || {
        let mut s = TrainState::<f32>::init(&ds, &mcfg, &cfg).unwrap();
        train(&ds, &mut s, &cfg, None).unwrap();
        s
    };
    let a = run();
    let b = run();
    assert_eq!(a.log, b.log);
    assert!(a.model.params.iter().zip(b.model.params.iter()).all(|(x, y)| x.value == y.value));

    let dir = tempfile::tempdir().unwrap();
    let mut s = TrainState::<f32>::init(&ds, &mcfg, &cfg).unwrap();
    train_until(&ds, &mut s, &cfg, 2, None).unwrap();
    let ckpt = dir.path().join("mid.cfts");
    s.save(&ckpt, &cfg).unwrap();
    let (mut resumed, info) = TrainState::<f32>::load(&ckpt).unwrap();
    assert_eq!(info.epoch, 2);
    assert_eq!(resumed.adam, s.adam);
    resumed.log = s.log.clone();
    train(&ds, &mut resumed, &cfg, None).unwrap();
    assert_eq!(resumed.log, a.log);
    assert!(resumed.model.params.iter().zip(a.model.params.iter()).all(|(x, y)| x.value == y.value));
}

#[test]
fn training_writes_log_and_checkpoints() {
    let ds = dataset(1, 4, 16, f64::INFINITY, false);
    let cfg = TrainConfig {
        batch: 2,
        epochs: 3,
        warmup_epochs: 1,
        checkpoint_every: 2,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut s = TrainState::<f32>::init(&ds, &small_model(16, Mode::Concat), &cfg).unwrap();
    train(&ds, &mut s, &cfg, Some(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,mean_loss,lr");
    assert_eq!(text.lines().count(), 4);
    assert!(dir.path().join("checkpoint_0002.cfts").exists());
    let (back, info) = TrainState::<f32>::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(info.epoch, 3);
    assert_eq!(back.log, s.log);
    assert!(back.model.params.iter().zip(s.model.params.iter()).all(|(x, y)| x.value == y.value));
}

#[test]
fn non_finite_data_aborts_with_location() {
    let mut ds = dataset(1, 4, 16, f64::INFINITY, false);
    let cfg = TrainConfig {
        batch: 2,
        epochs: 2,
        warmup_epochs: 1,
        ..Default::default()
    };
    let mut s = TrainState::<f32>::init(&ds, &small_model(16, Mode::Hypernet), &cfg).unwrap();
    ds.images[5] = f32::NAN;
    let err = train(&ds, &mut s, &cfg, None).unwrap_err();
    assert!(err.to_string().contains("epoch 0"), "{err}");
}

#[test]
fn overfitting_one_structure_reduces_loss_tenfold() {
    let ds = dataset(1, 50, 16, f64::INFINITY, false);
    let cfg = TrainConfig {
        batch: 10,
        epochs: 200,
        warmup_epochs: 5,
        lr: 2e-3,
        seed: 1,
        ..Default::default()
    };
    let mut mcfg = small_model(16, Mode::Hypernet);
    mcfg.hidden = 32;
    let mut s = TrainState::<f32>::init(&ds, &mcfg, &cfg).unwrap();
    train(&ds, &mut s, &cfg, None).unwrap();
    let first = s.log[0].mean_loss;
    let best = s.log.iter().map(|e| e.mean_loss).fold(f64::INFINITY, f64::min);
    assert!(first / best >= 10.0, "first {first}, best {best}");
}

#[test]
fn reconstruction_and_latents_are_deterministic() {
    let ds = dataset(2, 3, 16, 1.0, true);
    let cfg = TrainConfig::default();
    let s = TrainState::<f64>::init(&ds, &small_model(16, Mode::Hypernet), &cfg).unwrap();
    let img = centered_hartley(&ds, 0).unwrap();
    let a = reconstruct_volume(&s.model, &img, 16).unwrap();
    let b = reconstruct_volume(&s.model, &img, 16).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.size, 16);
    assert_eq!(a.voxel_size, 6.0);
    let up = reconstruct_volume(&s.model, &img, 24).unwrap();
    assert_eq!(up.values.len(), 24 * 24 * 24);
    assert!((up.voxel_size - 4.0).abs() < 1e-12);
    let lat = extract_latents(&s.model, &ds).unwrap();
    assert_eq!(lat.len(), ds.len());
    assert!(lat.iter().all(|r| r.len() == 3 * 16));
    let mut twin = ds.clone();
    let n = 16 * 16;
    let first: Vec<f32> = twin.images[..n].to_vec();
    twin.images[n..2 * n].copy_from_slice(&first);
    twin.poses[1] = twin.poses[0];
    let lt = extract_latents(&s.model, &twin).unwrap();
    assert_eq!(lt[0], lt[1]);
}
