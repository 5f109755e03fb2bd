use cryoforge::fourier::real_project;
use cryoforge::metrics::viou;
use cryoforge::phantom::{generate_phantom, PhantomSpec, SUPPORT_FRACTION};
use cryoforge::rng;
use cryoforge::simulate::sample_pose;

fn spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        ..PhantomSpec::for_structure(0, 0, 0.5)
    }
}

#[test]
fn distinct_seeds_give_dissimilar_shapes() {
    let mut similar = 0;
    for pair in 0..100u64 {
        let a = generate_phantom(&spec(2 * pair + 1), 32, 1.0).unwrap();
        let b = generate_phantom(&spec(2 * pair + 2), 32, 1.0).unwrap();
        if viou(&a, &b, 0.2, 0.2).unwrap() >= 0.9 {
            similar += 1;
        }
    }
    assert!(similar <= 5, "{similar} of 100 pairs have vIoU >= 0.9");
}

#[test]
fn density_stays_inside_support() {
    for i in 0..10 {
        let v = generate_phantom(&PhantomSpec::for_structure(4, i, 0.5), 32, 1.0).unwrap();
        let r = SUPPORT_FRACTION * 32.0;
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let d2 = [x, y, z].iter().map(|&c| (c as f64 - 16.0).powi(2)).sum::<f64>();
                    if d2 > r * r {
                        assert_eq!(v.values[(z * 32 + y) * 32 + x], 0.0);
                    }
                }
            }
        }
        assert!((v.max() - 1.0).abs() < 1e-12);
        assert!(v.values.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn projection_conserves_mass_under_rotation() {
    let mut r = rng::stream(9, 0);
    for i in 0..5 {
        let v = generate_phantom(&PhantomSpec::for_structure(6, i, 0.5), 32, 1.0).unwrap();
        let mass: f64 = v.values.iter().sum();
        let img = real_project(&v, &sample_pose(&mut r, 0.0).rotation).unwrap();
        let projected: f64 = img.iter().sum();
        assert!((projected / mass - 1.0).abs() < 0.02, "{projected} vs {mass}");
    }
}
