//! State transition matrices, finite-horizon controllability Gramians and the
//! Gaussian Markov kernel for systems in Brunovsky normal form.
//!
//! For a chain of `p` integrators over a horizon `Δ` the Gramian block is
//!
//! ```text
//! M_ij = Δ^(2p-i-j+1) / ((p-i)! (p-j)! (2p-i-j+1))
//! ```
//!
//! which is a diagonally scaled Cauchy (reversed Hilbert) matrix, so both its
//! inverse and its determinant have exact closed forms. The inverse is
//! assembled in integer arithmetic before the single division by `Δ`, so for
//! `Δ = 1` it is exact.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::numeric::factorial;
use crate::{Error, Result};

/// Longest integrator chain handled by the closed form.
pub const MAX_BLOCK: usize = 8;

/// Vector relative degree `(π₁, …, π_m)`; the state dimension is `Σ πₖ`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelativeDegree(Vec<usize>);

impl RelativeDegree {
    pub fn new(blocks: Vec<usize>) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|&p| p == 0) {
            return Err(Error::InvalidArgument(format!(
                "relative degree needs m ≥ 1 positive entries, got {blocks:?}"
            )));
        }
        Ok(Self(blocks))
    }

    /// Two double integrators: the flat form of the bicycle model.
    pub fn bicycle() -> Self {
        Self(vec![2, 2])
    }

    pub fn blocks(&self) -> &[usize] {
        &self.0
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.0.iter().sum()
    }

    /// Number of inputs `m`.
    pub fn inputs(&self) -> usize {
        self.0.len()
    }

    /// `(offset, size)` of every diagonal block.
    pub fn block_ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().scan(0, |off, &p| {
            let start = *off;
            *off += p;
            Some((start, p))
        })
    }

    /// Input matrix `B = blkdiag(e_{π₁}, …, e_{π_m})`.
    pub fn input_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.dim(), self.inputs());
        for (k, (off, p)) in self.block_ranges().enumerate() {
            b[(off + p - 1, k)] = 1.0;
        }
        b
    }

    /// Drift matrix `A` (ones on each block's superdiagonal).
    pub fn drift_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut a = DMatrix::zeros(n, n);
        for (off, p) in self.block_ranges() {
            for i in 0..p.saturating_sub(1) {
                a[(off + i, off + i + 1)] = 1.0;
            }
        }
        a
    }
}

impl std::fmt::Display for RelativeDegree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// `Φ(Δ) = exp(AΔ)`: block upper-triangular with entries `Δ^(j-i)/(j-i)!`.
pub fn state_transition(degree: &RelativeDegree, delta: f64) -> DMatrix<f64> {
    let n = degree.dim();
    let mut phi = DMatrix::zeros(n, n);
    for (off, p) in degree.block_ranges() {
        for i in 0..p {
            for j in i..p {
                phi[(off + i, off + j)] = delta.powi((j - i) as i32) / factorial(j - i);
            }
        }
    }
    phi
}

/// Gramian `∫₀^Δ Φ(σ) B Bᵀ Φ(σ)ᵀ dσ` by composite Simpson quadrature.
///
/// Reference route only: it uses nothing but [`state_transition`] and the
/// definition of the Gramian.
pub fn gramian_numeric_oracle(degree: &RelativeDegree, delta: f64, steps: usize) -> DMatrix<f64> {
    let steps = steps.max(2) + steps % 2;
    let n = degree.dim();
    let b = degree.input_matrix();
    let h = delta / steps as f64;
    let mut acc = DMatrix::zeros(n, n);
    for k in 0..=steps {
        let weight = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let pb = state_transition(degree, k as f64 * h) * &b;
        acc += (&pb * pb.transpose()) * weight;
    }
    acc * (h / 3.0)
}

/// Gramian together with its inverse and log-determinant over one horizon.
#[derive(Debug, Clone)]
pub struct GramianBundle {
    pub degree: RelativeDegree,
    pub delta: f64,
    pub transition: DMatrix<f64>,
    pub gramian: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

impl GramianBundle {
    /// Bundle from an externally computed Gramian (inverse and determinant by
    /// Cholesky factorisation).
    pub fn from_matrix(degree: &RelativeDegree, delta: f64, gramian: DMatrix<f64>) -> Result<Self> {
        let chol = gramian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("controllability Gramian".into()))?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let inverse = chol.inverse();
        Ok(Self {
            degree: degree.clone(),
            delta,
            transition: state_transition(degree, delta),
            gramian,
            inverse,
            log_det,
        })
    }
}

/// Exact integer numerator of the inverse block entry at `Δ = 1` (0-based `i, j`).
fn inverse_block_coefficient(p: usize, i: usize, j: usize) -> i128 {
    let (i, j) = (i + 1, j + 1);
    let fact = |k: usize| (1..=k as i128).product::<i128>();
    let p_i = p as i128;
    let (ii, jj) = (i as i128, j as i128);
    let mut num = fact(p - i) * fact(p - j);
    for r in 1..=p_i {
        num *= (2 * p_i - ii - r + 1) * (2 * p_i - jj - r + 1);
    }
    let mut den = 2 * p_i - ii - jj + 1;
    for r in 1..=p_i {
        if r != ii {
            den *= r - ii;
        }
        if r != jj {
            den *= r - jj;
        }
    }
    debug_assert_eq!(num % den, 0);
    num / den
}

/// Closed-form Gramian, inverse and log-determinant.
pub fn gramian_closed_form(degree: &RelativeDegree, delta: f64) -> Result<GramianBundle> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {delta}"
        )));
    }
    if let Some(&p) = degree.blocks().iter().find(|&&p| p > MAX_BLOCK) {
        return Err(Error::DegreeOverflow {
            degree: p,
            max: MAX_BLOCK,
        });
    }
    let n = degree.dim();
    let mut gramian = DMatrix::zeros(n, n);
    let mut inverse = DMatrix::zeros(n, n);
    let mut log_det = 0.0;
    for (off, p) in degree.block_ranges() {
        for i in 0..p {
            for j in 0..p {
                // 1-based exponent 2p - i - j + 1 becomes 2p - i - j - 1 with 0-based indices
                let e = 2 * p - i - j - 1;
                gramian[(off + i, off + j)] =
                    delta.powi(e as i32) / (factorial(p - i - 1) * factorial(p - j - 1) * e as f64);
                inverse[(off + i, off + j)] =
                    inverse_block_coefficient(p, i, j) as f64 / delta.powi(e as i32);
            }
        }
        log_det += (p * p) as f64 * delta.ln();
        for r in 1..=p {
            log_det += factorial(r - 1).ln() - factorial(p + r - 1).ln();
        }
    }
    Ok(GramianBundle {
        degree: degree.clone(),
        delta,
        transition: state_transition(degree, delta),
        gramian,
        inverse,
        log_det,
    })
}

/// Gaussian transition density of `dz = Az dt + √(2ε) B dw` over one horizon,
/// with the horizon-dependent pieces cached.
///
/// Read-only after construction, so it can be shared across threads.
#[derive(Debug, Clone)]
pub struct TransitionKernel {
    n: usize,
    eps: f64,
    transition: Vec<f64>,
    inverse: Vec<f64>,
    log_norm: f64,
}

impl TransitionKernel {
    pub fn new(bundle: &GramianBundle, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Domain(format!("ε must be positive, got {eps}")));
        }
        if !(bundle.delta > 0.0) {
            return Err(Error::Domain(format!(
                "horizon must be positive, got {}",
                bundle.delta
            )));
        }
        let n = bundle.degree.dim();
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
            (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)])
                .collect()
        };
        Ok(Self {
            n,
            eps,
            transition: row_major(&bundle.transition),
            inverse: row_major(&bundle.inverse),
            log_norm: -0.5 * n as f64 * (4.0 * PI * eps).ln() - 0.5 * bundle.log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `Φ z`.
    pub fn propagate(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| (0..n).map(|j| self.transition[i * n + j] * z[j]).sum())
            .collect()
    }

    /// `dᵀ M⁻¹ d`.
    pub fn quadratic_form(&self, d: &[f64]) -> f64 {
        let n = self.n;
        let mut q = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.inverse[i * n + j] * d[j];
            }
            q += d[i] * row;
        }
        q
    }

    /// `M⁻¹ d`.
    pub fn apply_inverse(&self, d: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| (0..n).map(|j| self.inverse[i * n + j] * d[j]).sum())
            .collect()
    }

    /// `Φᵀ v`.
    pub fn transition_transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|j| (0..n).map(|i| self.transition[i * n + j] * v[i]).sum())
            .collect()
    }

    /// Log-density of moving from `src` to `dst`, where `src_propagated = Φ src`.
    pub fn log_density_propagated(&self, src_propagated: &[f64], dst: &[f64]) -> f64 {
        let q = if self.n <= 16 {
            let mut d = [0.0; 16];
            for k in 0..self.n {
                d[k] = dst[k] - src_propagated[k];
            }
            self.quadratic_form(&d[..self.n])
        } else {
            let d: Vec<f64> = dst.iter().zip(src_propagated).map(|(a, b)| a - b).collect();
            self.quadratic_form(&d)
        };
        self.log_norm - q / (4.0 * self.eps)
    }

    pub fn log_density(&self, src: &[f64], dst: &[f64]) -> f64 {
        self.log_density_propagated(&self.propagate(src), dst)
    }

    pub fn log_normalisation(&self) -> f64 {
        self.log_norm
    }
}

/// `log κ` for a transition from `z_src` (earlier time) to `z_dst` (later time)
/// over the horizon of `bundle`.
pub fn markov_kernel_log(
    eps: f64,
    z_src: &DVector<f64>,
    z_dst: &DVector<f64>,
    bundle: &GramianBundle,
) -> Result<f64> {
    let kernel = TransitionKernel::new(bundle, eps)?;
    if z_src.len() != kernel.dim() || z_dst.len() != kernel.dim() {
        return Err(Error::InvalidArgument(
            "state dimension does not match relative degree".into(),
        ));
    }
    Ok(kernel.log_density(z_src.as_slice(), z_dst.as_slice()))
}
