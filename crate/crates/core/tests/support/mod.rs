//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// `n` draws of `N(mean, L Lᵀ)`.
pub fn gaussian_samples(mean: &[f64], l: &DMatrix<f64>, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let d = mean.len();
    (0..n)
        .map(|_| {
            let xi = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
            let x = l * xi;
            (0..d).map(|k| mean[k] + x[k]).collect()
        })
        .collect()
}

pub fn sample_mean(pts: &[Vec<f64>]) -> Vec<f64> {
    let d = pts[0].len();
    (0..d)
        .map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64)
        .collect()
}

/// Weighted mean and covariance.
pub fn moments(pts: &[Vec<f64>], w: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let d = pts[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|k| pts.iter().zip(w).map(|(p, w)| w * p[k]).sum())
        .collect();
    let cov = DMatrix::from_fn(d, d, |i, j| {
        pts.iter()
            .zip(w)
            .map(|(p, w)| w * (p[i] - mean[i]) * (p[j] - mean[j]))
            .sum()
    });
    (mean, cov)
}

fn lse(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport `min ⟨P, C⟩ − reg·H(P)` with marginals `a`, `b`,
/// by dual-potential Sinkhorn iterations until the marginal error is below `tol`.
pub fn entropic_ot(cost: &DMatrix<f64>, a: &[f64], b: &[f64], reg: f64, tol: f64) -> DMatrix<f64> {
    let (n, m) = cost.shape();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let plan = |f: &[f64], g: &[f64]| {
        DMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost[(i, j)]) / reg).exp())
    };
    for _ in 0..1_000_000 {
        for i in 0..n {
            f[i] = reg * a[i].ln() - reg * lse((0..m).map(|j| (g[j] - cost[(i, j)]) / reg));
        }
        for j in 0..m {
            g[j] = reg * b[j].ln() - reg * lse((0..n).map(|i| (f[i] - cost[(i, j)]) / reg));
        }
        let p = plan(&f, &g);
        let err: f64 = (0..n).map(|i| (p.row(i).sum() - a[i]).abs()).sum();
        if err < tol {
            return p;
        }
    }
    panic!("reference Sinkhorn did not converge");
}

/// Brute-force Monte Carlo estimate of the rectangular collision event over
/// uniformly drawn particle pairs.
pub fn collision_monte_carlo(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    lx: f64,
    ly: f64,
    pairs: usize,
    seed: u64,
) -> f64 {
    use rand::Rng;
    let mut r = rng(seed);
    let mut hits = 0usize;
    for _ in 0..pairs {
        let p = &a[r.random_range(0..a.len())];
        let q = &b[r.random_range(0..b.len())];
        if (p[0] - q[0]).abs() <= lx && (p[1] - q[1]).abs() <= ly {
            hits += 1;
        }
    }
    hits as f64 / pairs as f64
}

/// RK4 step of a generic autonomous-in-control ODE.
pub fn rk4<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], y: &[f64; N], dt: f64) -> [f64; N] {
    let add = |a: &[f64; N], b: &[f64; N], h: f64| -> [f64; N] {
        std::array::from_fn(|i| a[i] + h * b[i])
    };
    let k1 = f(y);
    let k2 = f(&add(y, &k1, dt / 2.0));
    let k3 = f(&add(y, &k2, dt / 2.0));
    let k4 = f(&add(y, &k3, dt));
    std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}
