//! Gridless density forecasting along Liouville characteristics.
//!
//! A weighted cloud carries, for each particle, its state and the value of the
//! joint density there. Along a closed-loop trajectory the density obeys
//! `d(log ρ)/dt = −∇·f`, so state and log-density are integrated together
//! (a 5-dimensional ODE per particle). Particles are independent and are
//! propagated in parallel; output order never depends on scheduling.

use std::io::{Read, Write};

use nalgebra::{Cholesky, Matrix4, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flatness::{to_flat, VehicleState, Wheelbase};
use crate::measure::DiscreteMeasure;
use crate::policy::{ClosedLoopField, ControlBounds, NominalPolicy, PolicyDesign};
use crate::{Error, Result};

/// Gaussian belief over `(x, y, θ, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: [f64; 4],
    pub covariance: [[f64; 4]; 4],
}

impl GaussianSpec {
    pub fn diagonal(mean: [f64; 4], variances: [f64; 4]) -> Self {
        let mut covariance = [[0.0; 4]; 4];
        for (i, v) in variances.iter().enumerate() {
            covariance[i][i] = *v;
        }
        Self { mean, covariance }
    }

    pub fn mean_state(&self) -> VehicleState {
        VehicleState::from_array(self.mean)
    }

    fn cov_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.covariance[i][j])
    }

    /// Cholesky factor and log-determinant, or an error if not SPD.
    pub fn factor(&self) -> Result<(Matrix4<f64>, f64)> {
        let c = self.cov_matrix();
        if (c - c.transpose()).abs().max() > 1e-12 * c.abs().max().max(1.0) {
            return Err(Error::NotPositiveDefinite(
                "covariance is not symmetric".into(),
            ));
        }
        let chol =
            Cholesky::new(c).ok_or_else(|| Error::NotPositiveDefinite("covariance".into()))?;
        let l = chol.l();
        if l.diagonal().iter().any(|d| !(*d > 0.0)) {
            return Err(Error::NotPositiveDefinite("covariance".into()));
        }
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok((l, log_det))
    }

    pub fn validate(&self) -> Result<()> {
        self.factor()?;
        if !(self.mean[3] > 0.0) {
            return Err(Error::Domain(format!(
                "mean speed must be positive, got {}",
                self.mean[3]
            )));
        }
        Ok(())
    }

    pub fn log_pdf(&self, x: &[f64; 4]) -> Result<f64> {
        let (l, log_det) = self.factor()?;
        Ok(log_pdf_factored(x, &self.mean, &l, log_det))
    }
}

fn log_pdf_factored(x: &[f64; 4], mean: &[f64; 4], l: &Matrix4<f64>, log_det: f64) -> f64 {
    let d = Vector4::from_fn(|i, _| x[i] - mean[i]);
    let w = l.solve_lower_triangular(&d).expect("nonsingular factor");
    -0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + log_det + w.norm_squared())
}

/// Particles of one vehicle's joint state density at a single time.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCloud {
    pub states: Vec<VehicleState>,
    pub log_densities: Vec<f64>,
    pub time: f64,
}

impl WeightedCloud {
    pub fn new(states: Vec<VehicleState>, log_densities: Vec<f64>, time: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Empty("weighted cloud"));
        }
        if states.len() != log_densities.len() {
            return Err(Error::InvalidArgument(
                "states and log-densities differ in length".into(),
            ));
        }
        if log_densities.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "log-densities must be finite".into(),
            ));
        }
        if let Some(i) = states.iter().position(|s| !s.is_valid()) {
            return Err(Error::Integration { particle: i, time });
        }
        Ok(Self {
            states,
            log_densities,
            time,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Probability mass carried by each particle.
    pub fn mass(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// Sample mean of the four state components.
    pub fn mean(&self) -> [f64; 4] {
        let mut m = [0.0; 4];
        for s in &self.states {
            for (k, c) in s.to_array().iter().enumerate() {
                m[k] += c;
            }
        }
        m.map(|c| c / self.len() as f64)
    }

    /// Pushforward of the particle measure through `τ`.
    pub fn flat_measure(&self) -> Result<DiscreteMeasure> {
        let pts = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                to_flat(s)
                    .map(|z| z.0.as_slice().to_vec())
                    .map_err(|_| Error::SingularFlatState {
                        particle: i,
                        time: self.time,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        DiscreteMeasure::uniform(pts)
    }
}

/// `N` i.i.d. draws from `spec`, each tagged with its log-density.
pub fn sample_cloud(spec: &GaussianSpec, n: usize, seed: u64) -> Result<WeightedCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "particle count must be at least 1".into(),
        ));
    }
    let (l, log_det) = spec.factor()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = Vector4::from(spec.mean);
    let mut states = Vec::with_capacity(n);
    let mut log_densities = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let x = mean + l * xi;
        let arr = [x[0], x[1], x[2], x[3]];
        log_densities.push(log_pdf_factored(&arr, &spec.mean, &l, log_det));
        states.push(VehicleState::from_array(arr));
    }
    WeightedCloud::new(states, log_densities, 0.0)
}

/// Saturated-LQR lane keeper about the mean of `spec`.
pub fn make_policy(
    spec: &GaussianSpec,
    bounds: ControlBounds,
    wheelbase: Wheelbase,
) -> Result<NominalPolicy> {
    spec.validate()?;
    NominalPolicy::design(
        &spec.mean_state(),
        bounds,
        wheelbase,
        &PolicyDesign::default(),
    )
}

/// Snapshots of a propagated cloud at increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudTrajectory {
    pub snapshots: Vec<WeightedCloud>,
}

impl CloudTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|c| c.time).collect()
    }

    pub fn initial(&self) -> &WeightedCloud {
        &self.snapshots[0]
    }

    pub fn terminal(&self) -> &WeightedCloud {
        self.snapshots
            .last()
            .expect("trajectory has at least one snapshot")
    }

    /// CSV with columns `t, particle_id, x, y, theta, v, log_density`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "particle_id", "x", "y", "theta", "v", "log_density"])?;
        for snap in &self.snapshots {
            for (i, (s, l)) in snap.states.iter().zip(&snap.log_densities).enumerate() {
                w.write_record(&[
                    snap.time.to_string(),
                    i.to_string(),
                    s.x.to_string(),
                    s.y.to_string(),
                    s.theta.to_string(),
                    s.v.to_string(),
                    l.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            t: f64,
            particle_id: usize,
            x: f64,
            y: f64,
            theta: f64,
            v: f64,
            log_density: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut snapshots: Vec<(f64, Vec<VehicleState>, Vec<f64>)> = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            if snapshots.last().map(|s| s.0) != Some(row.t) {
                snapshots.push((row.t, Vec::new(), Vec::new()));
            }
            let snap = snapshots.last_mut().expect("just pushed");
            if row.particle_id != snap.1.len() {
                return Err(Error::Config(format!(
                    "particle ids out of order at t = {} (got {}, expected {})",
                    row.t,
                    row.particle_id,
                    snap.1.len()
                )));
            }
            snap.1
                .push(VehicleState::new(row.x, row.y, row.theta, row.v));
            snap.2.push(row.log_density);
        }
        if snapshots.is_empty() {
            return Err(Error::Empty("trajectory CSV"));
        }
        let snapshots = snapshots
            .into_iter()
            .map(|(t, s, l)| WeightedCloud::new(s, l, t))
            .collect::<Result<Vec<_>>>()?;
        let n = snapshots[0].len();
        if snapshots.iter().any(|s| s.len() != n)
            || snapshots.windows(2).any(|w| w[1].time <= w[0].time)
        {
            return Err(Error::Config(
                "inconsistent snapshots in trajectory CSV".into(),
            ));
        }
        Ok(Self { snapshots })
    }
}

fn step_count(ratio: f64, what: &str) -> Result<usize> {
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * k.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} must be an integer multiple (ratio {ratio})"
        )));
    }
    Ok(k as usize)
}

fn augmented_rhs<F: ClosedLoopField>(field: &F, y: &[f64; 5], t: f64) -> [f64; 5] {
    let s = [y[0], y[1], y[2], y[3]];
    let f = field.rhs(&s, t);
    [f[0], f[1], f[2], f[3], -field.divergence(&s, t)]
}

fn rk4_step<F: ClosedLoopField>(field: &F, y: &[f64; 5], t: f64, dt: f64) -> [f64; 5] {
    let add = |a: &[f64; 5], b: &[f64; 5], h: f64| -> [f64; 5] {
        std::array::from_fn(|i| a[i] + h * b[i])
    };
    let k1 = augmented_rhs(field, y, t);
    let k2 = augmented_rhs(field, &add(y, &k1, dt / 2.0), t + dt / 2.0);
    let k3 = augmented_rhs(field, &add(y, &k2, dt / 2.0), t + dt / 2.0);
    let k4 = augmented_rhs(field, &add(y, &k3, dt), t + dt);
    std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Transports `cloud` over `[t₀, t₀ + horizon]` with RK4 step `dt`, storing a
/// snapshot every `dt_store` (both must divide their parent interval).
pub fn propagate_cloud<F: ClosedLoopField>(
    cloud: &WeightedCloud,
    field: &F,
    horizon: f64,
    dt: f64,
    dt_store: f64,
) -> Result<CloudTrajectory> {
    if !(horizon > 0.0 && dt > 0.0 && dt <= dt_store && dt_store <= horizon) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < dt ≤ dt_store ≤ horizon, got dt = {dt}, dt_store = {dt_store}, horizon = {horizon}"
        )));
    }
    let per_store = step_count(dt_store / dt, "dt_store / dt")?;
    let stores = step_count(horizon / dt_store, "horizon / dt_store")?;
    let t0 = cloud.time;

    let paths: Vec<Result<Vec<[f64; 5]>>> = cloud
        .states
        .par_iter()
        .zip(cloud.log_densities.par_iter())
        .enumerate()
        .map(|(i, (s, &l))| {
            let a = s.to_array();
            let mut y = [a[0], a[1], a[2], a[3], l];
            let mut out = Vec::with_capacity(stores);
            for k in 0..stores {
                for j in 0..per_store {
                    let t = t0 + ((k * per_store + j) as f64) * dt;
                    y = rk4_step(field, &y, t, dt);
                }
                if !(y[3] > 0.0) || y.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Integration {
                        particle: i,
                        time: t0 + ((k + 1) as f64) * dt_store,
                    });
                }
                out.push(y);
            }
            Ok(out)
        })
        .collect();
    let paths = paths.into_iter().collect::<Result<Vec<_>>>()?;

    let mut snapshots = Vec::with_capacity(stores + 1);
    snapshots.push(cloud.clone());
    for k in 0..stores {
        let time = t0 + ((k + 1) as f64) * dt_store;
        let states = paths
            .iter()
            .map(|p| VehicleState::new(p[k][0], p[k][1], p[k][2], p[k][3]))
            .collect();
        let logs = paths.iter().map(|p| p[k][4]).collect();
        snapshots.push(WeightedCloud::new(states, logs, time)?);
    }
    Ok(CloudTrajectory { snapshots })
}

/// `(x, y)` marginal of a particle cloud: positions with mass `1/N` each.
pub fn marginal_xy(cloud: &WeightedCloud) -> DiscreteMeasure {
    let pts = cloud.states.iter().map(|s| vec![s.x, s.y]).collect();
    DiscreteMeasure::uniform(pts).expect("cloud is non-empty")
}
