//! Small numerical helpers shared across modules.

use std::f64::consts::PI;

use nalgebra::DMatrix;

/// `log Σ exp(xᵢ)` with max-shift; `-∞` for an empty or all `-∞` input.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log-sum-exp over an indexed family without materialising it.
pub fn logsumexp_by(len: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        max = max.max(f(i));
    }
    if !max.is_finite() {
        return max;
    }
    let mut sum = 0.0;
    for i in 0..len {
        sum += (f(i) - max).exp();
    }
    max + sum.ln()
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

/// Matrix exponential by scaled Taylor series with repeated squaring.
///
/// Only used for the small (≤ 6×6) linearisations in the nominal policy.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Log-density of `N(mean, cov)` at `x`, via Cholesky.
pub fn gaussian_log_pdf(x: &[f64], mean: &[f64], chol_l: &DMatrix<f64>, log_det: f64) -> f64 {
    let n = x.len();
    let diff = nalgebra::DVector::from_iterator(n, x.iter().zip(mean).map(|(a, b)| a - b));
    let w = chol_l
        .solve_lower_triangular(&diff)
        .expect("Cholesky factor is nonsingular");
    -0.5 * (n as f64 * (2.0 * PI).ln() + log_det + w.norm_squared())
}
