//! Timing of Markov-kernel evaluation with the Gramian obtained by quadrature
//! versus the closed form.
//!
//! Every kernel value `κ(0 → z)` on a uniform grid over `[−1, 1]ⁿ` is computed
//! with its Gramian, inverse and determinant built from scratch, so the table
//! cost is dominated by how the Gramian is obtained.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::gramian::{
    gramian_closed_form, gramian_numeric_oracle, markov_kernel_log, GramianBundle, RelativeDegree,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub degree: String,
    pub dim: usize,
    pub samples: usize,
    pub oracle_s: f64,
    pub closed_form_s: f64,
    pub speedup: f64,
    /// Largest difference of `log κ` between the two routes.
    pub max_log_diff: f64,
}

/// Grid of `per_dim` points per coordinate over `[−1, 1]^dim`.
pub fn grid(dim: usize, per_dim: usize) -> Vec<DVector<f64>> {
    let axis: Vec<f64> = if per_dim == 1 {
        vec![0.0]
    } else {
        (0..per_dim)
            .map(|k| -1.0 + 2.0 * k as f64 / (per_dim - 1) as f64)
            .collect()
    };
    let total = per_dim.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            DVector::from_fn(dim, |_, _| {
                let c = axis[idx % per_dim];
                idx /= per_dim;
                c
            })
        })
        .collect()
}

fn table(
    points: &[DVector<f64>],
    eps: f64,
    bundle: impl Fn() -> Result<GramianBundle>,
) -> Result<(Vec<f64>, f64)> {
    let origin = DVector::zeros(points[0].len());
    let start = Instant::now();
    let values = points
        .iter()
        .map(|z| markov_kernel_log(eps, &origin, z, &bundle()?))
        .collect::<Result<Vec<_>>>()?;
    Ok((values, start.elapsed().as_secs_f64()))
}

/// One timing row per relative degree.
pub fn bench_gramian(
    degrees: &[RelativeDegree],
    delta: f64,
    eps: f64,
    grid_per_dim: usize,
    oracle_steps: usize,
) -> Result<Vec<BenchRow>> {
    if grid_per_dim == 0 {
        return Err(Error::InvalidArgument(
            "grid needs at least one point per dimension".into(),
        ));
    }
    degrees
        .iter()
        .map(|deg| {
            let points = grid(deg.dim(), grid_per_dim);
            let (oracle, oracle_s) = table(&points, eps, || {
                GramianBundle::from_matrix(
                    deg,
                    delta,
                    gramian_numeric_oracle(deg, delta, oracle_steps),
                )
            })?;
            let (closed, closed_form_s) = table(&points, eps, || gramian_closed_form(deg, delta))?;
            let max_log_diff = oracle
                .iter()
                .zip(&closed)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok(BenchRow {
                degree: deg.to_string(),
                dim: deg.dim(),
                samples: points.len(),
                oracle_s,
                closed_form_s,
                speedup: oracle_s / closed_form_s,
                max_log_diff,
            })
        })
        .collect()
}

/// Plain-text table of benchmark rows.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<10} {:>4} {:>8} {:>12} {:>14} {:>9} {:>12}\n",
        "degree", "n", "samples", "oracle [s]", "closed [s]", "speedup", "max |Δlogκ|"
    );
    for r in rows {
        s += &format!(
            "{:<10} {:>4} {:>8} {:>12.4} {:>14.4} {:>9.2} {:>12.2e}\n",
            r.degree, r.dim, r.samples, r.oracle_s, r.closed_form_s, r.speedup, r.max_log_diff
        );
    }
    s
}
