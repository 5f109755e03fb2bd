use super::*;
use crate::fourier::{centered_idft, hartley_3d};
use crate::phantom::generate_phantom;
use rustfft::num_complex::Complex64;

fn phantoms(n: usize, d: usize) -> Vec<VoxelVolume> {
    (0..n)
        .map(|i| {
            let spec = PhantomSpec::for_structure(11, i as u64, 0.5);
            generate_phantom(&spec, d, 6.0).unwrap()
        })
        .collect()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn pose_rotations_are_uniform_and_orthonormal() {
    let mut r = rng::stream(3, 9);
    let mut mean = [[0.0; 3]; 3];
    let n = 100_000;
    for _ in 0..n {
        let p = sample_pose(&mut r, 0.0);
        assert!(p.rotation.orthonormality_error() < 1e-12);
        assert!((p.rotation.det() - 1.0).abs() < 1e-12);
        assert_eq!(p.shift, (0.0, 0.0));
        let t = p.rotation.transpose().0;
        for i in 0..3 {
            for j in 0..3 {
                mean[i][j] += t[i][j] / n as f64;
            }
        }
    }
    for row in mean {
        for v in row {
            assert!(v.abs() < 0.02, "{mean:?}");
        }
    }
}

#[test]
fn pose_shift_bounded_by_t_max() {
    let mut r = rng::stream(5, 1);
    for _ in 0..1000 {
        let p = sample_pose(&mut r, 2.5);
        assert!(p.shift.0.abs() <= 2.5 && p.shift.1.abs() <= 2.5);
    }
}

#[test]
fn ctf_samples_respect_ranges() {
    let ranges = CtfRanges::default();
    let mut r = rng::stream(1, 1);
    for _ in 0..500 {
        let c = sample_ctf(&mut r, &ranges);
        assert!(c.defocus_u >= c.defocus_v);
        let mean = 0.5 * (c.defocus_u + c.defocus_v);
        assert!((10_000.0..20_000.0).contains(&mean));
        assert!(c.defocus_u - c.defocus_v <= 500.0 + 1e-9);
        assert_eq!((c.voltage, c.cs, c.amp_contrast), (300.0, 2.7, 0.1));
    }
}

#[test]
fn infinite_snr_gives_clean_images() {
    let ph = phantoms(2, 16);
    let cfg = SimulateConfig {
        n_per: 4,
        snr: f64::INFINITY,
        ..Default::default()
    };
    let (ds, clean) = simulate_with_clean(&ph, &cfg, 1).unwrap();
    assert_eq!(ds.manifest.noise_sigma, 0.0);
    for (a, b) in ds.images.iter().zip(&clean) {
        assert_eq!(*a, *b as f32);
    }
}

#[test]
fn measured_snr_matches_target() {
    let ph = phantoms(3, 16);
    for snr in [0.1, 0.01] {
        let cfg = SimulateConfig {
            n_per: 40,
            snr,
            ..Default::default()
        };
        let (ds, clean) = simulate_with_clean(&ph, &cfg, 17).unwrap();
        let signal = variance(clean.iter().copied());
        let noise = variance(ds.images.iter().zip(&clean).map(|(&a, &b)| a as f64 - b));
        let measured = signal / noise;
        assert!((measured / snr - 1.0).abs() < 0.1, "target {snr}, measured {measured}");
    }
}

#[test]
fn labels_survive_the_shuffle() {
    let ph = phantoms(3, 16);
    let cfg = SimulateConfig {
        n_per: 5,
        snr: 0.5,
        ..Default::default()
    };
    let ds = simulate_dataset(&ph, &cfg, 23).unwrap();
    ds.validate().unwrap();
    assert_ne!(ds.manifest.order, (0..15).collect::<Vec<_>>());
    for i in [0, 7, 14] {
        let src = ds.manifest.order[i];
        let (pose, ctf) = particle_params(23, src, &cfg);
        assert_eq!(pose, ds.poses[i]);
        assert_eq!(ctf, ds.ctfs[i]);
        let mut img = clean_image(&ph[ds.structure_ids[i]], &pose, &ctf, cfg.pixel_size).unwrap();
        add_particle_noise(&mut img, 23, src, ds.manifest.noise_sigma);
        let regen: Vec<f32> = img.iter().map(|&v| v as f32).collect();
        assert_eq!(regen.as_slice(), ds.image(i));
        // a different structure does not reproduce it
        let other = (ds.structure_ids[i] + 1) % 3;
        let wrong = clean_image(&ph[other], &pose, &ctf, cfg.pixel_size).unwrap();
        let right = clean_image(&ph[ds.structure_ids[i]], &pose, &ctf, cfg.pixel_size).unwrap();
        assert!(rel_l2(&wrong, &right) > 0.1);
    }
}

#[test]
fn simulation_is_deterministic() {
    let ph = phantoms(2, 16);
    let cfg = SimulateConfig {
        n_per: 6,
        ..Default::default()
    };
    let a = simulate_dataset(&ph, &cfg, 4).unwrap();
    let b = simulate_dataset(&ph, &cfg, 4).unwrap();
    assert_eq!(a, b);
    let c = simulate_dataset(&ph, &cfg, 5).unwrap();
    assert_ne!(a.images, c.images);
}

#[test]
fn mismatched_phantom_sizes_rejected() {
    let mut ph = phantoms(1, 16);
    ph.push(VoxelVolume::zeros(8, 6.0));
    let err = simulate_dataset(&ph, &SimulateConfig::default(), 1).unwrap_err();
    assert!(matches!(err, Error::UnsupportedSize(_)));
    assert!(simulate_dataset(&[], &SimulateConfig::default(), 1).is_err());
    let bad = SimulateConfig {
        snr: 0.0,
        ..Default::default()
    };
    assert!(simulate_dataset(&phantoms(1, 16), &bad, 1).is_err());
}

#[test]
fn hartley_ctf_matches_real_space_convolution() {
    let d = 16;
    let ph = phantoms(1, d);
    let pose = sample_pose(&mut rng::stream(2, 2), 0.0);
    let ctf = CtfParams {
        defocus_u: 12_000.0,
        defocus_v: 12_000.0,
        astig_angle: 0.0,
        voltage: 300.0,
        cs: 2.7,
        amp_contrast: 0.1,
        phase_shift: 0.0,
        b_factor: 20.0,
    };
    let via_hartley = clean_image(&ph[0], &pose, &ctf, 6.0).unwrap();

    let c = ctf_evaluate(&ctf, d, 6.0);
    let spec: Vec<Complex64> = c.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let psf: Vec<f64> = centered_idft(&spec, d, 2).unwrap().iter().map(|z| z.re).collect();
    let proj = real_project(&ph[0], &pose.rotation).unwrap();
    let h = (d / 2) as isize;
    let di = d as isize;
    let mut conv = vec![0.0; d * d];
    for y in 0..di {
        for x in 0..di {
            let mut acc = 0.0;
            for v in 0..di {
                for u in 0..di {
                    // psf is centered at (h, h)
                    let py = (y - v + h).rem_euclid(di);
                    let px = (x - u + h).rem_euclid(di);
                    acc += proj[(v * di + u) as usize] * psf[(py * di + px) as usize];
                }
            }
            conv[(y * di + x) as usize] = acc;
        }
    }
    assert!(rel_l2(&via_hartley, &conv) < 1e-3, "{}", rel_l2(&via_hartley, &conv));
}

#[test]
fn shifted_particles_recentre_exactly_for_whole_pixels() {
    let d = 16;
    let ph = phantoms(1, d);
    let mut pose = Pose::identity();
    let centred = clean_image(&ph[0], &pose, &CtfParams::identity(), 6.0).unwrap();
    pose.shift = (2.0, -3.0);
    let shifted = clean_image(&ph[0], &pose, &CtfParams::identity(), 6.0).unwrap();
    // content moved by +t
    for y in 0..d {
        for x in 0..d {
            let (xs, ys) = ((x + 2) % d, (y + d - 3) % d);
            assert!((shifted[ys * d + xs] - centred[y * d + x]).abs() < 1e-9);
        }
    }
    let h = hartley_2d(&shifted, d, 6.0).unwrap();
    let back = inverse_hartley_2d(&phase_shift_center(&h, pose.shift)).unwrap();
    assert!(rel_l2(&back, &centred) < 1e-12);
}

#[test]
fn single_view_fills_the_central_plane() {
    let d = 16;
    let img: Vec<f64> = (0..d * d).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
    let h = hartley_2d(&img, d, 6.0).unwrap();
    let mask = crate::fourier::disk_mask(d);
    for (floor, gain) in [(0.0, 1.0), (DEFAULT_WIENER_FLOOR, 1.0 / 1.01)] {
        let vol = backproject(&[&img], &[Pose::identity()], &[CtfParams::identity()], d, 6.0, floor).unwrap();
        let hv = hartley_3d(&vol).unwrap();
        let z = d / 2;
        for y in 0..d {
            for x in 0..d {
                if mask[y * d + x] {
                    let got = hv.values[(z * d + y) * d + x];
                    let want = gain * h.values[y * d + x];
                    assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "{got} {want}");
                }
            }
        }
    }
}

#[test]
fn backprojection_is_order_independent() {
    let ph = phantoms(1, 16);
    let cfg = SimulateConfig {
        n_per: 30,
        snr: 1.0,
        ..Default::default()
    };
    let ds = simulate_dataset(&ph, &cfg, 8).unwrap();
    let fwd: Vec<usize> = (0..ds.len()).collect();
    let rev: Vec<usize> = fwd.iter().rev().copied().collect();
    let a = backproject_dataset(&ds, &fwd, DEFAULT_WIENER_FLOOR).unwrap();
    let b = backproject_dataset(&ds, &rev, DEFAULT_WIENER_FLOOR).unwrap();
    let scale = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() <= 1e-6 * scale.max(1.0));
    }
}

#[test]
fn backprojection_output_is_finite() {
    let ph = phantoms(1, 16);
    for floor in [0.0, 1e-6, DEFAULT_WIENER_FLOOR, 1.0] {
        let cfg = SimulateConfig {
            n_per: 3,
            snr: 0.05,
            ..Default::default()
        };
        let ds = simulate_dataset(&ph, &cfg, 31).unwrap();
        let v = backproject_dataset(&ds, &[0, 1, 2], floor).unwrap();
        assert!(v.values.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn backprojection_rejects_empty_input() {
    let err = backproject(&[], &[], &[], 16, 6.0, DEFAULT_WIENER_FLOOR).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
}

#[test]
fn config_roundtrips_infinite_snr() {
    let cfg = SimulateConfig {
        snr: f64::INFINITY,
        ..Default::default()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    assert!(text.contains("\"inf\""));
    let back: SimulateConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<SimulateConfig>(r#"{"snr": 0.1, "bogus": 1}"#).is_err());
}

#[test]
fn dataset_files_roundtrip() {
    let ph = phantoms(2, 16);
    let cfg = SimulateConfig {
        n_per: 3,
        t_max: 1.5,
        ..Default::default()
    };
    let ds = simulate_dataset(&ph, &cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = io::write_dataset(&ds, dir.path(), &["gt_000.mrc".into()]).unwrap();
    let text = std::fs::read_to_string(dir.path().join(io::METADATA_FILE)).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "index,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,defocus_u,defocus_v,astig_angle,voltage,cs,amp_contrast,phase_shift,b_factor,structure_id"
    );
    let back = io::read_dataset(&manifest).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.poses, ds.poses);
    assert_eq!(back.ctfs, ds.ctfs);
    assert_eq!(back.structure_ids, ds.structure_ids);
    assert_eq!(back.manifest.files.volumes, vec!["gt_000.mrc".to_string()]);
    assert_eq!(io::read_dataset(dir.path()).unwrap().images, ds.images);
}
