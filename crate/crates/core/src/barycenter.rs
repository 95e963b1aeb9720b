//! Entropic Wasserstein barycenters on a fixed support by iterative Bregman
//! projections, computed in the log domain.
//!
//! Coordinates are standardised per axis before the squared-Euclidean cost is
//! formed, so the result is invariant to rescaling any coordinate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measure::DiscreteMeasure;
use crate::numeric::logsumexp_by;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarycenterConfig {
    /// Entropic regularisation in standardised units.
    pub eps: f64,
    pub max_iter: usize,
    /// L1 tolerance on the input-marginal residuals.
    pub tol: f64,
}

impl Default for BarycenterConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            max_iter: 5000,
            tol: 1e-6,
        }
    }
}

/// Per-coordinate standard deviation of the pooled input support points;
/// degenerate axes get unit scale.
pub fn pooled_scale(inputs: &[&DiscreteMeasure]) -> Vec<f64> {
    let dim = inputs[0].dim();
    let count: usize = inputs.iter().map(|m| m.len()).sum();
    let mut mean = vec![0.0; dim];
    for p in inputs.iter().flat_map(|m| m.iter_points()) {
        for k in 0..dim {
            mean[k] += p[k] / count as f64;
        }
    }
    let mut var = vec![0.0; dim];
    for p in inputs.iter().flat_map(|m| m.iter_points()) {
        for k in 0..dim {
            var[k] += (p[k] - mean[k]).powi(2) / count as f64;
        }
    }
    var.into_iter()
        .zip(&mean)
        .map(|(v, m)| {
            let s = v.sqrt();
            if s > 1e-12 * m.abs().max(1.0) {
                s
            } else {
                1.0
            }
        })
        .collect()
}

/// Union of the input supports together with each input translated so its mean
/// lands on the weighted mean of all input means. Exact duplicates are merged.
pub fn candidate_support(inputs: &[&DiscreteMeasure], weights: &[f64]) -> Vec<Vec<f64>> {
    let dim = inputs[0].dim();
    let means: Vec<Vec<f64>> = inputs.iter().map(|m| m.mean()).collect();
    let mut target = vec![0.0; dim];
    for (m, &w) in means.iter().zip(weights) {
        for k in 0..dim {
            target[k] += w * m[k];
        }
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |p: Vec<f64>| {
        let key: Vec<u64> = p.iter().map(|c| (c + 0.0).to_bits()).collect();
        if seen.insert(key) {
            out.push(p);
        }
    };
    for m in inputs {
        for p in m.iter_points() {
            push(p.to_vec());
        }
    }
    for (m, mean) in inputs.iter().zip(&means) {
        for p in m.iter_points() {
            push((0..dim).map(|k| p[k] + (target[k] - mean[k])).collect());
        }
    }
    out
}

/// Outcome of a barycenter solve.
#[derive(Debug, Clone)]
pub struct Barycenter {
    pub measure: DiscreteMeasure,
    pub iterations: usize,
    pub residual: f64,
}

/// Weighted entropic barycenter of `inputs` restricted to `support`.
pub fn fixed_support_barycenter(
    inputs: &[&DiscreteMeasure],
    weights: &[f64],
    support: &[Vec<f64>],
    scale: &[f64],
    cfg: &BarycenterConfig,
) -> Result<Barycenter> {
    if inputs.is_empty() || support.is_empty() {
        return Err(Error::Empty("barycenter inputs"));
    }
    if inputs.len() != weights.len() {
        return Err(Error::InvalidArgument(
            "one weight per input is required".into(),
        ));
    }
    if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(
            "weights must be non-negative and sum to 1".into(),
        ));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ε must be positive, got {}",
            cfg.eps
        )));
    }
    let dim = inputs[0].dim();
    if inputs.iter().any(|m| m.dim() != dim)
        || support.iter().any(|p| p.len() != dim)
        || scale.len() != dim
    {
        return Err(Error::InvalidArgument(
            "dimension mismatch in barycenter inputs".into(),
        ));
    }

    let s_len = support.len();
    // log K_k[s, i] = −|ŝ − ẑ_i|² / ε, row-major over support points
    let log_kernels: Vec<Vec<f64>> = inputs
        .iter()
        .map(|m| {
            let n = m.len();
            let mut k = vec![0.0; s_len * n];
            k.par_chunks_mut(n)
                .zip(support.par_iter())
                .for_each(|(row, s)| {
                    for (i, z) in m.iter_points().enumerate() {
                        let d2: f64 = (0..dim).map(|c| ((s[c] - z[c]) / scale[c]).powi(2)).sum();
                        row[i] = -d2 / cfg.eps;
                    }
                });
            k
        })
        .collect();
    let log_mu: Vec<Vec<f64>> = inputs
        .iter()
        .map(|m| m.masses().iter().map(|w| w.ln()).collect())
        .collect();

    let mut log_a: Vec<Vec<f64>> = vec![vec![0.0; s_len]; inputs.len()];
    let mut log_b: Vec<Vec<f64>> = inputs.iter().map(|m| vec![0.0; m.len()]).collect();
    let mut log_p = vec![0.0; s_len];
    let mut residual = f64::INFINITY;

    for iter in 1..=cfg.max_iter {
        // input marginals: b_k = μ_k ⊘ K_kᵀ a_k
        for k in 0..inputs.len() {
            let n = inputs[k].len();
            let (lk, la) = (&log_kernels[k], &log_a[k]);
            log_b[k] = (0..n)
                .into_par_iter()
                .map(|i| log_mu[k][i] - logsumexp_by(s_len, |s| lk[s * n + i] + la[s]))
                .collect();
        }
        // shared marginal: p = Π_k (K_k b_k)^{λ_k} a_k^{λ_k}, then a_k = p ⊘ K_k b_k
        let log_kb: Vec<Vec<f64>> = (0..inputs.len())
            .map(|k| {
                let n = inputs[k].len();
                let (lk, lb) = (&log_kernels[k], &log_b[k]);
                (0..s_len)
                    .into_par_iter()
                    .map(|s| logsumexp_by(n, |i| lk[s * n + i] + lb[i]))
                    .collect()
            })
            .collect();
        for s in 0..s_len {
            log_p[s] = (0..inputs.len())
                .map(|k| weights[k] * (log_a[k][s] + log_kb[k][s]))
                .sum();
        }
        for k in 0..inputs.len() {
            for s in 0..s_len {
                log_a[k][s] = log_p[s] - log_kb[k][s];
            }
        }
        // residual of the input marginals after the shared projection
        residual = 0.0;
        for k in 0..inputs.len() {
            let n = inputs[k].len();
            let (lk, la) = (&log_kernels[k], &log_a[k]);
            let r: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let col = log_b[k][i] + logsumexp_by(s_len, |s| lk[s * n + i] + la[s]);
                    (col.exp() - inputs[k].masses()[i]).abs()
                })
                .collect();
            residual += r.iter().sum::<f64>();
        }
        if residual < cfg.tol {
            let total = crate::numeric::logsumexp(&log_p);
            let masses: Vec<f64> = log_p.iter().map(|l| (l - total).exp()).collect();
            let measure = DiscreteMeasure::new(support.to_vec(), masses)?;
            return Ok(Barycenter {
                measure,
                iterations: iter,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        solver: "Bregman barycenter",
        iterations: cfg.max_iter,
        gap: residual,
    })
}

/// Equal-weight barycenter of two measures on their union support plus
/// mean-aligned translates.
pub fn wasserstein_barycenter(
    front: &DiscreteMeasure,
    back: &DiscreteMeasure,
    cfg: &BarycenterConfig,
) -> Result<Barycenter> {
    if front.dim() != back.dim() {
        return Err(Error::InvalidArgument(
            "barycenter inputs differ in dimension".into(),
        ));
    }
    let inputs = [front, back];
    let weights = [0.5, 0.5];
    let support = candidate_support(&inputs, &weights);
    let scale = pooled_scale(&inputs);
    fixed_support_barycenter(&inputs, &weights, &support, &scale, cfg)
}
