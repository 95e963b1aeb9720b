//! Schrödinger bridge between two discrete measures under the Brunovsky prior
//! `dz = (Az + Bũ) dt + √(2ε) B dw`.
//!
//! The pair of factors `(φ̂₀, φ_T)` is found by the alternating log-domain
//! fixed point on the Markov kernel over the whole horizon. The optimal
//! feedback is `ũ = 2ε Bᵀ ∇_z log φ(z, t)`, whose gradient has a closed form as
//! a softmax-weighted sum over the terminal atoms.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flatness::{
    from_flat, physical_control_from_flat, FlatControl, FlatState, PhysicalControl, VehicleState,
    Wheelbase,
};
use crate::gramian::{gramian_closed_form, state_transition, RelativeDegree, TransitionKernel};
use crate::liouville::WeightedCloud;
use crate::measure::DiscreteMeasure;
use crate::numeric::logsumexp_by;
use crate::{Error, Result};

/// Endpoint marginals, regularisation and horizon of one steering problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeProblem {
    pub sigma0: DiscreteMeasure,
    pub sigma_t: DiscreteMeasure,
    pub eps: f64,
    pub horizon: f64,
    pub degree: RelativeDegree,
}

impl BridgeProblem {
    /// Validates the data and merges duplicate atoms of both marginals.
    pub fn new(
        sigma0: DiscreteMeasure,
        sigma_t: DiscreteMeasure,
        eps: f64,
        horizon: f64,
        degree: RelativeDegree,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ε must be positive, got {eps}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let n = degree.dim();
        if sigma0.dim() != n || sigma_t.dim() != n {
            return Err(Error::InvalidArgument(format!(
                "marginals live in dimension {} and {}, the prior in {n}",
                sigma0.dim(),
                sigma_t.dim()
            )));
        }
        Ok(Self {
            sigma0: sigma0.merge_duplicates(),
            sigma_t: sigma_t.merge_duplicates(),
            eps,
            horizon,
            degree,
        })
    }

    fn kernel(&self, delta: f64) -> Result<TransitionKernel> {
        TransitionKernel::new(&gramian_closed_form(&self.degree, delta)?, self.eps)
    }
}

/// Initial marginal `τ♯ρ₀` of the ego cloud and the desired terminal marginal.
pub fn endpoint_measures(
    ego_cloud: &WeightedCloud,
    desired: &DiscreteMeasure,
) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    Ok((ego_cloud.flat_measure()?, desired.clone()))
}

/// Row-major `K₀ × K_T` table of log-kernel values over the whole horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LogKernel {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl LogKernel {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

pub fn build_log_kernel(problem: &BridgeProblem) -> Result<LogKernel> {
    let kernel = problem.kernel(problem.horizon)?;
    let (s0, st) = (&problem.sigma0, &problem.sigma_t);
    let cols = st.len();
    let mut values = vec![0.0; s0.len() * cols];
    values
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| {
            let prop = kernel.propagate(s0.point(i));
            for (j, v) in row.iter_mut().enumerate() {
                *v = kernel.log_density_propagated(&prop, st.point(j));
            }
        });
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("log-kernel has non-finite entries".into()));
    }
    Ok(LogKernel {
        rows: s0.len(),
        cols,
        values,
    })
}

/// Hilbert projective distance `log(max(p/q) / min(p/q))` between positive vectors.
pub fn hilbert_metric(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::InvalidArgument(
            "vectors must be non-empty and of equal length".into(),
        ));
    }
    if p.iter().chain(q).any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Domain(
            "Hilbert metric needs strictly positive entries".into(),
        ));
    }
    let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
    Ok(hilbert_metric_log(&lp, &lq))
}

/// Hilbert distance between `exp(lp)` and `exp(lq)`.
pub fn hilbert_metric_log(lp: &[f64], lq: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (a, b) in lp.iter().zip(lq) {
        let d = a - b;
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (hi - lo).max(0.0)
}

/// Solution of the factor fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeFactors {
    pub log_phi_hat0: Vec<f64>,
    pub log_phi_t: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gap: f64,
}

fn lse_rows(k: &LogKernel, v: &[f64]) -> Vec<f64> {
    (0..k.rows)
        .into_par_iter()
        .map(|i| {
            let row = &k.values[i * k.cols..(i + 1) * k.cols];
            logsumexp_by(k.cols, |j| row[j] + v[j])
        })
        .collect()
}

fn lse_cols(k: &LogKernel, v: &[f64]) -> Vec<f64> {
    (0..k.cols)
        .into_par_iter()
        .map(|j| logsumexp_by(k.rows, |i| k.values[i * k.cols + j] + v[i]))
        .collect()
}

/// Alternates `log φ_T ← log σ_T − LSE_i(log K + log φ̂₀)` and
/// `log φ̂₀ ← log σ₀ − LSE_j(log K + log φ_T)` until both Hilbert gaps between
/// consecutive iterates drop below `tol`.
///
/// Exhausting `max_iter` is not an error here: the result carries
/// `converged = false` and the last gap.
pub fn fixed_point(
    problem: &BridgeProblem,
    log_kernel: &LogKernel,
    tol: f64,
    max_iter: usize,
) -> Result<BridgeFactors> {
    let (s0, st) = (&problem.sigma0, &problem.sigma_t);
    if log_kernel.rows != s0.len() || log_kernel.cols != st.len() {
        return Err(Error::InvalidArgument(
            "kernel shape does not match the marginals".into(),
        ));
    }
    let log_mu0: Vec<f64> = s0.masses().iter().map(|m| m.ln()).collect();
    let log_mut: Vec<f64> = st.masses().iter().map(|m| m.ln()).collect();
    let mut log_phi_hat0 = vec![0.0; s0.len()];
    let mut log_phi_t = vec![0.0; st.len()];
    let mut gap = f64::INFINITY;
    for iter in 1..=max_iter {
        let col = lse_cols(log_kernel, &log_phi_hat0);
        let next_t: Vec<f64> = log_mut.iter().zip(&col).map(|(m, c)| m - c).collect();
        let row = lse_rows(log_kernel, &next_t);
        let next_0: Vec<f64> = log_mu0.iter().zip(&row).map(|(m, r)| m - r).collect();
        gap =
            hilbert_metric_log(&next_t, &log_phi_t).max(hilbert_metric_log(&next_0, &log_phi_hat0));
        log_phi_t = next_t;
        log_phi_hat0 = next_0;
        if log_phi_t
            .iter()
            .chain(&log_phi_hat0)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Domain("bridge factors became non-finite".into()));
        }
        if gap < tol {
            return Ok(BridgeFactors {
                log_phi_hat0,
                log_phi_t,
                converged: true,
                iterations: iter,
                final_gap: gap,
            });
        }
    }
    Ok(BridgeFactors {
        log_phi_hat0,
        log_phi_t,
        converged: false,
        iterations: max_iter,
        final_gap: gap,
    })
}

impl BridgeFactors {
    /// Largest relative violation of `φ̂₀ ⊙ (K φ_T) = σ₀` and
    /// `(Kᵀ φ̂₀) ⊙ φ_T = σ_T`, in that order.
    pub fn boundary_residuals(
        &self,
        problem: &BridgeProblem,
        log_kernel: &LogKernel,
    ) -> (f64, f64) {
        let row = lse_rows(log_kernel, &self.log_phi_t);
        let col = lse_cols(log_kernel, &self.log_phi_hat0);
        let rel = |log_lhs: f64, m: f64| ((log_lhs).exp() - m).abs() / m;
        let r0 = (0..row.len())
            .map(|i| rel(self.log_phi_hat0[i] + row[i], problem.sigma0.masses()[i]))
            .fold(0.0, f64::max);
        let rt = (0..col.len())
            .map(|j| rel(self.log_phi_t[j] + col[j], problem.sigma_t.masses()[j]))
            .fold(0.0, f64::max);
        (r0, rt)
    }

    /// Static coupling `Pᵢⱼ = φ̂₀ᵢ Kᵢⱼ φ_Tⱼ` (row-major).
    pub fn coupling(&self, log_kernel: &LogKernel) -> Vec<f64> {
        let c = log_kernel.cols;
        (0..log_kernel.rows * c)
            .map(|k| {
                (self.log_phi_hat0[k / c] + log_kernel.values[k] + self.log_phi_t[k % c]).exp()
            })
            .collect()
    }
}

/// `(log φ̂(z, t), log φ(z, t))` for `t ∈ [0, T]`, measured from the start of the
/// horizon. At an endpoint the corresponding factor is a sum of Dirac masses,
/// so it equals the stored value on an atom and `−∞` elsewhere.
pub fn evaluate_factors(
    factors: &BridgeFactors,
    problem: &BridgeProblem,
    z: &[f64],
    t: f64,
) -> Result<(f64, f64)> {
    let horizon = problem.horizon;
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "t = {t} lies outside [0, {horizon}]"
        )));
    }
    if z.len() != problem.degree.dim() {
        return Err(Error::InvalidArgument(
            "state dimension does not match the prior".into(),
        ));
    }
    let on_atom = |m: &DiscreteMeasure, logs: &[f64]| {
        m.iter_points()
            .position(|p| p == z)
            .map_or(f64::NEG_INFINITY, |i| logs[i])
    };
    let log_phi_hat = if t > 0.0 {
        let k = problem.kernel(t)?;
        let s0 = &problem.sigma0;
        logsumexp_by(s0.len(), |i| {
            k.log_density(s0.point(i), z) + factors.log_phi_hat0[i]
        })
    } else {
        on_atom(&problem.sigma0, &factors.log_phi_hat0)
    };
    let log_phi = if t < horizon {
        let k = problem.kernel(horizon - t)?;
        let prop = k.propagate(z);
        let st = &problem.sigma_t;
        logsumexp_by(st.len(), |j| {
            k.log_density_propagated(&prop, st.point(j)) + factors.log_phi_t[j]
        })
    } else {
        on_atom(&problem.sigma_t, &factors.log_phi_t)
    };
    Ok((log_phi_hat, log_phi))
}

/// Optimal feedback frozen at one time: the kernel over the remaining horizon is
/// built once and reused for every state.
#[derive(Debug, Clone)]
pub struct ControlField<'a> {
    factors: &'a BridgeFactors,
    problem: &'a BridgeProblem,
    kernel: TransitionKernel,
    input_rows: Vec<usize>,
}

impl<'a> ControlField<'a> {
    pub fn new(factors: &'a BridgeFactors, problem: &'a BridgeProblem, t: f64) -> Result<Self> {
        if !(t >= 0.0 && t < problem.horizon) {
            return Err(Error::InvalidArgument(format!(
                "control needs t in [0, {}), got {t}",
                problem.horizon
            )));
        }
        let input_rows = problem
            .degree
            .block_ranges()
            .map(|(off, p)| off + p - 1)
            .collect();
        Ok(Self {
            factors,
            problem,
            kernel: problem.kernel(problem.horizon - t)?,
            input_rows,
        })
    }

    /// Probabilities of the terminal atoms given `z` at this time, along with
    /// `Φ(T − t) z`.
    pub fn endpoint_weights(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let st = &self.problem.sigma_t;
        let prop = self.kernel.propagate(z);
        let logits: Vec<f64> = (0..st.len())
            .map(|j| {
                self.kernel.log_density_propagated(&prop, st.point(j)) + self.factors.log_phi_t[j]
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        (w, prop)
    }

    fn grad_from_weights(&self, w: &[f64], prop: &[f64]) -> Vec<f64> {
        let st = &self.problem.sigma_t;
        let mut d: Vec<f64> = prop.iter().map(|p| -p).collect();
        for (j, wj) in w.iter().enumerate() {
            for (acc, c) in d.iter_mut().zip(st.point(j)) {
                *acc += wj * c;
            }
        }
        let g = self
            .kernel
            .transition_transpose_apply(&self.kernel.apply_inverse(&d));
        g.into_iter()
            .map(|v| v / (2.0 * self.problem.eps))
            .collect()
    }

    /// `∇_z log φ(z, t)`.
    pub fn grad_log_phi(&self, z: &[f64]) -> Vec<f64> {
        let (w, prop) = self.endpoint_weights(z);
        self.grad_from_weights(&w, &prop)
    }

    fn input_part(&self, g: &[f64]) -> Vec<f64> {
        self.input_rows
            .iter()
            .map(|&r| 2.0 * self.problem.eps * g[r])
            .collect()
    }

    /// `ũ = 2ε Bᵀ ∇_z log φ`.
    pub fn control(&self, z: &[f64]) -> Vec<f64> {
        self.input_part(&self.grad_log_phi(z))
    }
}

/// Optimal flat control at `(z, t)`, with `t` measured from the start of the horizon.
pub fn optimal_control(
    factors: &BridgeFactors,
    problem: &BridgeProblem,
    z: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    if z.len() != problem.degree.dim() {
        return Err(Error::InvalidArgument(
            "state dimension does not match the prior".into(),
        ));
    }
    Ok(ControlField::new(factors, problem, t)?.control(z))
}

/// Flat-state paths and the controls applied on each step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledEnsemble {
    pub times: Vec<f64>,
    /// `states[k][s]`: state of simulation `s` at `times[k]`.
    pub states: Vec<Vec<Vec<f64>>>,
    /// `controls[k][s]`: optimal control at `(states[k][s], times[k])`.
    pub controls: Vec<Vec<Vec<f64>>>,
}

impl ControlledEnsemble {
    pub fn simulations(&self) -> usize {
        self.states[0].len()
    }

    pub fn terminal(&self) -> &[Vec<f64>] {
        self.states.last().expect("ensemble has a terminal time")
    }
}

/// Gaussian step of the prior pinned at a terminal point: from `z` at `t`, the
/// state at `t + h` given `z_T = y` is `N(Φ_h z + G (y − Φ_r z), 2ε S)` with
/// `r = T − t`, `G = M_h Φ_{r−h}ᵀ M_r⁻¹` and `S = M_h − G Φ_{r−h} M_h`.
struct PinnedStep {
    phi_h: DMatrix<f64>,
    phi_r: DMatrix<f64>,
    gain: DMatrix<f64>,
    noise: DMatrix<f64>,
}

impl PinnedStep {
    fn new(degree: &RelativeDegree, eps: f64, h: f64, r: f64) -> Result<Self> {
        let mh = gramian_closed_form(degree, h)?.gramian;
        let mr_inv = gramian_closed_form(degree, r)?.inverse;
        let rest = state_transition(degree, r - h);
        let gain = &mh * rest.transpose() * mr_inv;
        let cov = (&mh - &gain * &rest * &mh) * (2.0 * eps);
        let cov = (&cov + cov.transpose()) * 0.5;
        // square root through the spectrum so the last, degenerate step stays valid
        let eig = cov.symmetric_eigen();
        let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let noise = &eig.eigenvectors * DMatrix::from_diagonal(&root);
        Ok(Self {
            phi_h: state_transition(degree, h),
            phi_r: state_transition(degree, r),
            gain,
            noise,
        })
    }

    fn sample(&self, z: &[f64], y: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_column_slice(z);
        let y = DVector::from_column_slice(y);
        let xi = DVector::from_fn(z.len(), |_, _| StandardNormal.sample(rng));
        let next = &self.phi_h * &z + &self.gain * (y - &self.phi_r * &z) + &self.noise * xi;
        next.as_slice().to_vec()
    }
}

/// Closed-loop simulation of the optimally steered diffusion on a uniform grid.
///
/// The steered transition over one step is sampled exactly: a terminal atom is
/// drawn with its current softmax weight and the step is taken along the prior
/// pinned at that atom. Seeding is per simulation, so results do not depend on
/// thread scheduling.
pub fn simulate_controlled(
    problem: &BridgeProblem,
    factors: &BridgeFactors,
    n_sim: usize,
    dt: f64,
    seed: u64,
) -> Result<ControlledEnsemble> {
    if n_sim == 0 {
        return Err(Error::InvalidArgument(
            "need at least one simulation".into(),
        ));
    }
    if !(dt > 0.0 && dt <= problem.horizon) {
        return Err(Error::InvalidArgument(format!(
            "step must lie in (0, horizon], got {dt}"
        )));
    }
    let steps = (problem.horizon / dt).round() as usize;
    if ((steps as f64) * dt - problem.horizon).abs() > 1e-9 * problem.horizon {
        return Err(Error::InvalidArgument(
            "step must divide the horizon".into(),
        ));
    }

    let pick = WeightedIndex::new(problem.sigma0.masses())
        .map_err(|e| Error::InvalidArgument(format!("initial masses: {e}")))?;
    let mut rngs: Vec<ChaCha8Rng> = (0..n_sim)
        .map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s as u64);
            r
        })
        .collect();
    let mut current: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| problem.sigma0.point(pick.sample(r)).to_vec())
        .collect();

    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    for (k, &t) in times[..steps].iter().enumerate() {
        let field = ControlField::new(factors, problem, t)?;
        let remaining = problem.horizon - t;
        let h = if k + 1 == steps { remaining } else { dt };
        let step = PinnedStep::new(&problem.degree, problem.eps, h, remaining)?;
        let moved: Vec<(Vec<f64>, Vec<f64>)> = current
            .par_iter()
            .zip(rngs.par_iter_mut())
            .map(|(z, rng)| {
                let (w, prop) = field.endpoint_weights(z);
                let u = field.input_part(&field.grad_from_weights(&w, &prop));
                let j = WeightedIndex::new(&w)
                    .expect("softmax weights are positive")
                    .sample(rng);
                (step.sample(z, problem.sigma_t.point(j), rng), u)
            })
            .collect();
        let (next, u): (Vec<_>, Vec<_>) = moved.into_iter().unzip();
        if next.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Domain(format!(
                "controlled simulation diverged at t = {t}"
            )));
        }
        states.push(std::mem::replace(&mut current, next));
        controls.push(u);
    }
    states.push(current);
    Ok(ControlledEnsemble {
        times,
        states,
        controls,
    })
}

/// Physical states and controls along a flat ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalEnsemble {
    pub states: Vec<Vec<VehicleState>>,
    pub controls: Vec<Vec<PhysicalControl>>,
}

/// Maps a four-dimensional flat ensemble back through `τ⁻¹`.
pub fn map_back_trajectories(
    ensemble: &ControlledEnsemble,
    wheelbase: Wheelbase,
) -> Result<PhysicalEnsemble> {
    let singular = |k: usize, s: usize| Error::SingularFlatState {
        particle: s,
        time: ensemble.times[k],
    };
    let flat = |z: &[f64]| -> Option<FlatState> {
        (z.len() == 4).then(|| FlatState::new(z[0], z[1], z[2], z[3]))
    };
    let mut states = Vec::with_capacity(ensemble.states.len());
    let mut controls = Vec::with_capacity(ensemble.controls.len());
    for (k, row) in ensemble.states.iter().enumerate() {
        let mapped = row
            .iter()
            .enumerate()
            .map(|(s, z)| {
                flat(z)
                    .and_then(|f| from_flat(&f).ok())
                    .ok_or_else(|| singular(k, s))
            })
            .collect::<Result<Vec<_>>>()?;
        states.push(mapped);
        if let Some(us) = ensemble.controls.get(k) {
            let mapped = row
                .iter()
                .zip(us)
                .enumerate()
                .map(|(s, (z, u))| {
                    let f = flat(z).ok_or_else(|| singular(k, s))?;
                    physical_control_from_flat(
                        &f,
                        &FlatControl(nalgebra::Vector2::new(u[0], u[1])),
                        wheelbase,
                    )
                    .map_err(|_| singular(k, s))
                })
                .collect::<Result<Vec<_>>>()?;
            controls.push(mapped);
        }
    }
    Ok(PhysicalEnsemble { states, controls })
}

/// Serializable bridge solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSolution {
    pub problem: BridgeProblem,
    pub factors: BridgeFactors,
    pub boundary_residuals: [f64; 2],
}

/// CSV with columns `t, sim_id, z1..z4, u1, u2, x, y, theta, v, a, phi`; the
/// control columns are empty on the terminal row.
pub fn write_ensemble_csv<W: Write>(
    writer: W,
    ensemble: &ControlledEnsemble,
    physical: &PhysicalEnsemble,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "t", "sim_id", "z1", "z2", "z3", "z4", "u1", "u2", "x", "y", "theta", "v", "a", "phi",
    ])?;
    for (k, &t) in ensemble.times.iter().enumerate() {
        for s in 0..ensemble.simulations() {
            let z = &ensemble.states[k][s];
            let p = &physical.states[k][s];
            let mut rec = vec![t.to_string(), s.to_string()];
            rec.extend(z.iter().map(|c| c.to_string()));
            match (ensemble.controls.get(k), physical.controls.get(k)) {
                (Some(u), Some(pu)) => {
                    rec.extend(u[s].iter().map(|c| c.to_string()));
                    rec.extend(
                        [p.x, p.y, p.theta, p.v, pu[s].accel, pu[s].steer].map(|c| c.to_string()),
                    );
                }
                _ => {
                    rec.extend([String::new(), String::new()]);
                    rec.extend([p.x, p.y, p.theta, p.v].map(|c| c.to_string()));
                    rec.extend([String::new(), String::new()]);
                }
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
