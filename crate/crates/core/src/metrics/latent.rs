use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Principal-component projection of a latent matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `N × d₁`, rows in input order.
    pub projected: Vec<Vec<f64>>,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Unit principal directions (`d₁ × F`); zero rows pad a deficient rank.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Set when the data has fewer than `d₁` non-degenerate directions.
    pub rank_deficient: bool,
}

/// Mean-centred projection onto the top `d1` principal directions.
pub fn pca_reduce(latents: &[Vec<f64>], d1: usize) -> Result<Pca> {
    let n = latents.len();
    if n <= d1 {
        return Err(Error::Argument(format!("PCA to {d1} dimensions needs more than {d1} rows, got {n}")));
    }
    let f = latents[0].len();
    if latents.iter().any(|r| r.len() != f) {
        return Err(Error::shape("pca_reduce", "rows have different lengths"));
    }
    let mut mean = vec![0.0; f];
    for r in latents {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, f, |i, j| latents[i][j] - mean[j]);
    let denom = (n - 1).max(1) as f64;

    // eigen-decompose whichever of XᵀX and XXᵀ is smaller
    let (vals, dirs): (Vec<f64>, Vec<Vec<f64>>) = if f <= n {
        let cov = x.transpose() * &x / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        order
            .iter()
            .map(|&i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .unzip()
    } else {
        let gram = &x * x.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        order
            .iter()
            .map(|&i| {
                let u = eig.eigenvectors.column(i);
                let v = x.transpose() * u;
                let norm = v.norm();
                let dir = if norm > 0.0 { v / norm } else { v };
                (eig.eigenvalues[i], dir.iter().copied().collect())
            })
            .unzip()
    };

    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * 1e-12 * f.max(n) as f64;
    let mut components = Vec::with_capacity(d1);
    let mut explained = Vec::with_capacity(d1);
    let mut deficient = false;
    for c in 0..d1 {
        match (vals.get(c), dirs.get(c)) {
            (Some(&v), Some(dir)) if v > tol && top > 0.0 => {
                let mut dir = dir.clone();
                // deterministic sign: largest-magnitude entry positive
                let big = dir.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if big < 0.0 {
                    dir.iter_mut().for_each(|x| *x = -*x);
                }
                components.push(dir);
                explained.push(v);
            }
            _ => {
                deficient = true;
                components.push(vec![0.0; f]);
                explained.push(0.0);
            }
        }
    }
    let projected = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..f).map(|j| x[(i, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        projected,
        explained_variance: explained,
        components,
        mean,
        rank_deficient: deficient,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// k-nearest-neighbour classification on a seeded 80/20 split with
/// macro-averaged precision, recall and F1.
pub fn knn_classify(points: &[Vec<f64>], labels: &[usize], k: usize, seed: u64) -> Result<Classification> {
    if points.len() != labels.len() {
        return Err(Error::shape("knn_classify", format!("{} points, {} labels", points.len(), labels.len())));
    }
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Argument("classification needs at least two classes".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng::stream(seed, 0x6b6e6e));
    let n_train = (points.len() * 4).div_ceil(5);
    let (train, test) = order.split_at(n_train);
    if test.is_empty() {
        return Err(Error::Argument("too few points for an 80/20 split".into()));
    }
    for &c in &classes {
        if !train.iter().any(|&i| labels[i] == c) {
            return Err(Error::Argument(format!("class {c} has no training points")));
        }
    }
    let mut predictions = Vec::with_capacity(test.len());
    for &i in test {
        let mut d: Vec<(f64, usize)> = train
            .iter()
            .map(|&j| {
                let s: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum();
                (s, j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &d[..k.min(d.len())];
        // majority vote, ties to the class of the closer neighbour
        let mut best = (0usize, usize::MAX, 0usize);
        for (rank, &(_, j)) in nearest.iter().enumerate() {
            let c = labels[j];
            let votes = nearest.iter().filter(|&&(_, m)| labels[m] == c).count();
            if votes > best.0 || (votes == best.0 && rank < best.1) {
                best = (votes, rank, c);
            }
        }
        predictions.push(best.2);
    }
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let correct = truth.iter().zip(&predictions).filter(|(a, b)| a == b).count();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp = truth.iter().zip(&predictions).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let pred_c = predictions.iter().filter(|&&p| p == c).count() as f64;
        let true_c = truth.iter().filter(|&&t| t == c).count() as f64;
        let p = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
        let r = if true_c > 0.0 { tp / true_c } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let nc = classes.len() as f64;
    Ok(Classification {
        accuracy: correct as f64 / test.len() as f64,
        precision: p_sum / nc,
        recall: r_sum / nc,
        f1: f_sum / nc,
        train_size: train.len(),
        test_size: test.len(),
    })
}
