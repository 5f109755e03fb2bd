use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::simulate::{simulate_dataset, SimulateConfig};

fn phantom(d: usize, i: u64) -> VoxelVolume {
    generate_phantom(&PhantomSpec::for_structure(77, i, 0.5), d, 6.0).unwrap()
}

fn noise(d: usize, seed: u64) -> VoxelVolume {
    let mut r = rng::stream(seed, 5);
    VoxelVolume {
        size: d,
        voxel_size: 6.0,
        values: (0..d * d * d).map(|_| StandardNormal.sample(&mut r)).collect(),
    }
}

#[test]
fn fsc_self_and_negation() {
    let v = phantom(16, 0);
    let neg = VoxelVolume {
        values: v.values.iter().map(|x| -x).collect(),
        ..v.clone()
    };
    let c = fsc(&v, &v).unwrap();
    assert_eq!(c.values.len(), 8);
    assert!(c.values.iter().all(|x| (x - 1.0).abs() < 1e-10));
    assert!(fsc(&v, &neg).unwrap().values.iter().all(|x| (x + 1.0).abs() < 1e-10));
    let copy = v.clone();
    assert!(fsc(&v, &copy).unwrap().values.iter().all(|x| (x - 1.0).abs() < 1e-10));
}

#[test]
fn fsc_rejects_mismatched_grids() {
    let a = phantom(16, 0);
    assert!(fsc(&a, &VoxelVolume::zeros(8, 6.0)).is_err());
    assert!(fsc(&a, &VoxelVolume::zeros(16, 3.0)).is_err());
}

#[test]
fn fsc_against_independent_noise_is_near_zero() {
    let d = 16;
    let v = phantom(d, 1);
    let mut mean = vec![0.0; d / 2];
    for s in 0..20 {
        let c = fsc(&v, &noise(d, s)).unwrap();
        assert!(c.values.iter().all(|x| (-1.0..=1.0).contains(x)));
        for (m, x) in mean.iter_mut().zip(&c.values) {
            *m += x / 20.0;
        }
    }
    let c = (d / 2) as f64;
    let mut counts = vec![0usize; d / 2 + 1];
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2)).sqrt();
                let k = r.round() as usize;
                if k <= d / 2 {
                    counts[k] += 1;
                }
            }
        }
    }
    for (k, m) in mean.iter().enumerate() {
        let bound = 3.0 / (counts[k + 1] as f64).sqrt();
        assert!(m.abs() <= bound, "shell {}: {m} > {bound}", k + 1);
    }
}

#[test]
fn auc_examples() {
    let ones = FscCurve { values: vec![1.0; 16] };
    assert_eq!(fsc_auc(&ones), 1.0);
    let zeros = FscCurve { values: vec![0.0; 16] };
    assert!((fsc_auc(&zeros) - 1.0 / 32.0).abs() < 1e-15);
}

#[test]
fn resolution_examples() {
    let ones = FscCurve { values: vec![1.0; 16] };
    assert_eq!(fsc_resolution(&ones, 0.143).unwrap(), 2.0);
    assert_eq!(fsc_resolution(&ones, 0.5).unwrap(), 2.0);
    let d = 32;
    let linear = FscCurve {
        values: (1..=d / 2).map(|k| 1.0 - k as f64 / (d / 2) as f64).collect(),
    };
    assert!((fsc_resolution(&linear, 0.5).unwrap() - 4.0).abs() < 1e-12);
    assert!(fsc_resolution(&linear, 0.0).is_err());
    assert!(fsc_resolution(&linear, 1.0).is_err());
}

#[test]
fn pointcloud_centering_and_threshold() {
    let mut v = VoxelVolume::zeros(8, 2.5);
    let i = v.index(4, 4, 4);
    v.values[i] = 1.0;
    let j = v.index(5, 4, 2);
    v.values[j] = 0.5;
    let pc = to_pointcloud(&v, 0.7).unwrap();
    assert_eq!(pc.points, vec![[0.0, 0.0, 0.0]]);
    let pc = to_pointcloud(&v, 0.5).unwrap();
    assert_eq!(pc.len(), 1);
    let pc = to_pointcloud(&v, 0.1).unwrap();
    assert!(pc.points.contains(&[2.5, 0.0, -5.0]));
    assert!(to_pointcloud(&v, 2.0).unwrap().is_empty());
    assert!(to_pointcloud(&v, f64::NAN).is_err());
}

fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
    PointCloud { points, threshold: 0.0 }
}

#[test]
fn chamfer_examples() {
    let a = cloud(vec![[0.0, 0.0, 0.0]]);
    let b = cloud(vec![[3.0, 0.0, 0.0]]);
    assert_eq!(chamfer(&a, &b).unwrap(), 3.0);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    let e = cloud(vec![]);
    assert!(matches!(chamfer(&a, &e), Err(Error::UndefinedMetric(_))));
}

fn brute_chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let nn = |p: &[f64; 3], s: &[[f64; 3]]| {
        s.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let ab = a.iter().map(|p| nn(p, b)).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|p| nn(p, a)).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

fn pts() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-40.0f64..40.0), 1..60)
}

proptest! {
    #[test]
    fn chamfer_matches_brute_force(a in pts(), b in pts()) {
        let (ca, cb) = (cloud(a.clone()), cloud(b.clone()));
        let c = chamfer(&ca, &cb).unwrap();
        prop_assert!((c - brute_chamfer(&a, &b)).abs() < 1e-9);
        prop_assert_eq!(c, chamfer(&cb, &ca).unwrap());
        prop_assert!(c >= 0.0);
        prop_assert_eq!(chamfer(&ca, &ca).unwrap(), 0.0);
    }

    #[test]
    fn auc_is_monotone_under_dominance(
        base in prop::collection::vec(-1.0f64..1.0, 8),
        bump in prop::collection::vec(0.0f64..0.5, 8),
    ) {
        let lo = FscCurve { values: base.clone() };
        let hi = FscCurve { values: base.iter().zip(&bump).map(|(a, b)| a + b).collect() };
        prop_assert!(fsc_auc(&hi) >= fsc_auc(&lo));
    }
}

#[test]
fn chamfer_zero_only_for_equal_sets() {
    let a = cloud(vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
    let b = cloud(vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    assert_eq!(chamfer(&a, &b).unwrap(), 0.0);
    let c = cloud(vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.5]]);
    assert!(chamfer(&a, &c).unwrap() > 0.0);
}

fn support(d: usize, f: impl Fn(usize, usize, usize) -> bool) -> VoxelVolume {
    let mut v = VoxelVolume::zeros(d, 1.0);
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                if f(x, y, z) {
                    let i = v.index(x, y, z);
                    v.values[i] = 1.0;
                }
            }
        }
    }
    v
}

#[test]
fn viou_examples() {
    let a = support(8, |x, _, _| x < 2);
    let b = support(8, |x, _, _| x < 4);
    let c = support(8, |x, _, _| x >= 6);
    assert_eq!(viou(&a, &a, 0.5, 0.5).unwrap(), 1.0);
    assert_eq!(viou(&a, &c, 0.5, 0.5).unwrap(), 0.0);
    assert_eq!(viou(&a, &b, 0.5, 0.5).unwrap(), 0.5);
    let z = VoxelVolume::zeros(8, 1.0);
    assert_eq!(viou(&z, &z, 0.5, 0.5).unwrap(), 0.0);
}

#[test]
fn viou_is_monotone_under_inclusion() {
    let mut r = rng::stream(4, 4);
    for _ in 0..50 {
        let keep: Vec<f64> = (0..512).map(|_| r.random::<f64>()).collect();
        let t1: f64 = r.random_range(0.0..0.4);
        let t2: f64 = r.random_range(t1..0.7);
        let t3: f64 = r.random_range(t2..1.0);
        let at = |t: f64| support(8, |x, y, z| keep[(z * 8 + y) * 8 + x] < t);
        let (a, b, c) = (at(t1), at(t2), at(t3));
        let ac = viou(&a, &c, 0.5, 0.5).unwrap();
        let bc = viou(&b, &c, 0.5, 0.5).unwrap();
        assert!(ac <= bc);
        assert!((0.0..=1.0).contains(&ac));
    }
}

fn small_dataset() -> (ParticleDataset, Vec<VoxelVolume>) {
    let gt: Vec<_> = (0..3).map(|i| phantom(16, i)).collect();
    let cfg = SimulateConfig {
        n_per: 20,
        snr: f64::INFINITY,
        ctf: false,
        ..Default::default()
    };
    (simulate_dataset(&gt, &cfg, 3).unwrap(), gt)
}

#[test]
fn oracle_protocol_scores_perfectly() {
    let (ds, gt) = small_dataset();
    let cfg = MetricsConfig {
        pred_threshold: 5e-5,
        ..Default::default()
    };
    let rep = per_image_protocol(&ds, &OracleSource(&gt), &gt, &cfg).unwrap();
    assert_eq!(rep.rows.len(), 3);
    assert!((rep.mean("fsc_auc") - 1.0).abs() < 1e-12);
    assert_eq!(rep.mean("chamfer_A"), 0.0);
    assert_eq!(rep.mean("viou"), 1.0);
    for (s, r) in rep.rows.iter().enumerate() {
        assert_eq!(r.structure_id, s);
        assert_eq!(ds.structure_ids[r.image_index], s);
    }
    let dir = tempfile::tempdir().unwrap();
    write_report(&rep, dir.path(), &cfg, &serde_json::json!({"k": 1})).unwrap();
    let csv = fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "structure_id,fsc_auc,res_0143,res_05,chamfer_A,viou");
    assert_eq!(csv.lines().count(), 4);
    let js: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(js["config"]["k"], 1);
}

#[test]
fn backprojection_through_protocol_matches_standalone() {
    let (ds, gt) = small_dataset();
    let cfg = MetricsConfig::default();
    let rep = per_image_protocol(&ds, &BackprojectSource::default(), &gt, &cfg).unwrap();
    for r in &rep.rows {
        let v = backproject_dataset(&ds, &ds.indices_of(r.structure_id), DEFAULT_WIENER_FLOOR).unwrap();
        let alone = fsc_auc(&fsc(&masked(&v, true), &masked(&gt[r.structure_id], true)).unwrap());
        assert_eq!(alone.to_bits(), r.fsc_auc.to_bits());
    }
}

#[test]
fn missing_structure_is_skipped_with_warning() {
    let (mut ds, gt) = small_dataset();
    ds.manifest.structure_count = 4;
    let mut gt4 = gt.clone();
    gt4.push(phantom(16, 9));
    let rep = per_image_protocol(&ds, &OracleSource(&gt4), &gt4, &MetricsConfig::default()).unwrap();
    assert_eq!(rep.rows.len(), 3);
    assert_eq!(rep.warnings.len(), 1);
    assert!(rep.warnings[0].contains("structure 3"));
}

#[test]
fn aggregates_recompute_from_rows() {
    let a = Aggregate::of(&[1.0, 3.0, 2.0, 10.0]);
    assert_eq!(a.mean, 4.0);
    assert_eq!(a.median, 2.5);
    assert!((a.std - (12.5f64).sqrt()).abs() < 1e-12);
}

fn low_rank(n: usize, f: usize, rank: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 1);
    let basis: Vec<Vec<f64>> = (0..rank).map(|_| (0..f).map(|_| StandardNormal.sample(&mut r)).collect()).collect();
    (0..n)
        .map(|_| {
            let c: Vec<f64> = (0..rank).map(|_| StandardNormal.sample(&mut r)).collect();
            (0..f).map(|j| 3.0 + (0..rank).map(|k| c[k] * basis[k][j]).sum::<f64>()).collect()
        })
        .collect()
}

#[test]
fn pca_on_low_rank_data_is_exact() {
    for (n, f) in [(40, 12), (10, 30)] {
        let x = low_rank(n, f, 4, n as u64);
        let p = pca_reduce(&x, 4).unwrap();
        assert!(!p.rank_deficient);
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        for (i, row) in x.iter().enumerate() {
            for j in 0..f {
                let rec = p.mean[j] + (0..4).map(|c| p.projected[i][c] * p.components[c][j]).sum::<f64>();
                assert!((rec - row[j]).abs() < 1e-8, "{rec} {}", row[j]);
            }
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        for i in 0..5 {
            for j in 0..5 {
                assert!((dist(&x[i], &x[j]) - dist(&p.projected[i], &p.projected[j])).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn pca_flags_deficient_rank() {
    let x = low_rank(30, 10, 2, 3);
    let p = pca_reduce(&x, 5).unwrap();
    assert!(p.rank_deficient);
    assert_eq!(p.projected[0].len(), 5);
    assert!(p.components[4].iter().all(|&v| v == 0.0));
    assert!(pca_reduce(&x[..5], 5).is_err());
}

#[test]
fn knn_separates_clusters() {
    let mut r = rng::stream(2, 2);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for c in 0..4 {
        for _ in 0..30 {
            let p: Vec<f64> = (0..3).map(|a| if a == c % 3 { 50.0 * (1 + c / 3) as f64 } else { 0.0 } + r.random::<f64>()).collect();
            pts.push(p);
            labels.push(c);
        }
    }
    let res = knn_classify(&pts, &labels, 1, 7).unwrap();
    assert_eq!(res.accuracy, 1.0);
    assert_eq!(res.f1, 1.0);
    assert_eq!(res.train_size + res.test_size, 120);
}

#[test]
fn knn_on_shuffled_labels_is_chance() {
    let mut total = 0.0;
    for seed in 0..20 {
        let mut r = rng::stream(seed, 9);
        let pts: Vec<Vec<f64>> = (0..500).map(|_| (0..4).map(|_| r.random::<f64>()).collect()).collect();
        let mut labels: Vec<usize> = (0..500).map(|i| i % 10).collect();
        labels.shuffle(&mut r);
        total += knn_classify(&pts, &labels, 1, seed).unwrap().accuracy / 20.0;
    }
    assert!((total - 0.1).abs() <= 0.05, "{total}");
}

#[test]
fn knn_requires_every_class_in_training() {
    let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
    let mut labels = vec![0; 10];
    labels[3] = 1;
    let split_without = (0..100u64).find(|&s| knn_classify(&pts, &labels, 1, s).is_err()).unwrap();
    let err = knn_classify(&pts, &labels, 1, split_without).unwrap_err();
    assert!(err.to_string().contains("class 1"), "{err}");
    assert!(knn_classify(&pts, &[0; 10], 1, 0).is_err());
}
