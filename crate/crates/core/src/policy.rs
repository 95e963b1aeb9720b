//! Nominal lane- and speed-holding feedback used for the forecasts.
//!
//! Each vehicle is regulated about its straight-driving trim `(x₀ + v₀ t, y₀,
//! 0, v₀)` by a discrete-time LQR gain designed on the zero-order-hold
//! linearisation of the bicycle model and saturated to the actuator box.

use nalgebra::{DMatrix, Matrix2x4};
use serde::{Deserialize, Serialize};

use crate::flatness::{bicycle_rhs_unchecked, PhysicalControl, VehicleState, Wheelbase};
use crate::numeric::{expm, wrap_angle};
use crate::{Error, Result};

/// Box constraints on the physical control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub accel_min: f64,
    pub accel_max: f64,
    pub steer_min: f64,
    pub steer_max: f64,
}

impl Default for ControlBounds {
    /// ±2 m/s² and ±0.5°.
    fn default() -> Self {
        let steer = 0.5f64.to_radians();
        Self {
            accel_min: -2.0,
            accel_max: 2.0,
            steer_min: -steer,
            steer_max: steer,
        }
    }
}

impl ControlBounds {
    pub fn contains(&self, u: &PhysicalControl) -> bool {
        (self.accel_min..=self.accel_max).contains(&u.accel)
            && (self.steer_min..=self.steer_max).contains(&u.steer)
    }

    pub fn clamp(&self, u: PhysicalControl) -> PhysicalControl {
        PhysicalControl::new(
            u.accel.clamp(self.accel_min, self.accel_max),
            u.steer.clamp(self.steer_min, self.steer_max),
        )
    }
}

/// LQR weights and sampling time for the policy design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyDesign {
    pub state_weight: f64,
    pub control_weight: f64,
    pub sampling_time: f64,
}

impl Default for PolicyDesign {
    fn default() -> Self {
        Self {
            state_weight: 10.0,
            control_weight: 1.0,
            sampling_time: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NominalPolicy {
    pub trim_state: VehicleState,
    pub trim_control: PhysicalControl,
    /// `u = trim_control + gain · (s − trim(t))` before saturation.
    pub gain: Matrix2x4<f64>,
    pub bounds: ControlBounds,
    pub sampling_time: f64,
    pub t0: f64,
    pub wheelbase: Wheelbase,
}

/// Iterates the discrete Riccati equation to a fixed point and returns `K`
/// such that `u = −K x` is optimal.
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("Riccati iteration".into()))?;
        let next = a.transpose() * &p * a - a.transpose() * &p * b * &s_inv * &btp * a + q;
        let diff = (&next - &p).abs().max();
        let scale = next.abs().max().max(1.0);
        p = next;
        if diff <= 1e-13 * scale {
            let s = r + b.transpose() * &p * b;
            let s_inv = s
                .try_inverse()
                .ok_or_else(|| Error::NotPositiveDefinite("Riccati solution".into()))?;
            return Ok(s_inv * b.transpose() * &p * a);
        }
    }
    Err(Error::NonConvergence {
        solver: "discrete Riccati iteration",
        iterations: 100_000,
        gap: f64::NAN,
    })
}

/// Zero-order-hold discretisation `(Φ, Γ)` of `(A, B)` with sampling time `ts`.
pub fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = expm(&(aug * ts));
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

impl NominalPolicy {
    /// Saturated LQR about the straight-driving trim through `mean`.
    pub fn design(
        mean: &VehicleState,
        bounds: ControlBounds,
        wheelbase: Wheelbase,
        design: &PolicyDesign,
    ) -> Result<Self> {
        if !(mean.v > 0.0) {
            return Err(Error::Domain(format!(
                "trim speed must be positive, got {}",
                mean.v
            )));
        }
        let trim_control = PhysicalControl::ZERO;
        if !bounds.contains(&trim_control) {
            return Err(Error::InvalidArgument(
                "control bounds exclude the trim control".into(),
            ));
        }
        let v0 = mean.v;
        let l = wheelbase.get();
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, v0,  0.0,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ]);
        #[rustfmt::skip]
        let b = DMatrix::from_row_slice(4, 2, &[
            0.0, 0.0,
            0.0, 0.0,
            0.0, v0 / l,
            1.0, 0.0,
        ]);
        let (ad, bd) = zoh(&a, &b, design.sampling_time);
        let q = DMatrix::identity(4, 4) * design.state_weight;
        let r = DMatrix::identity(2, 2) * design.control_weight;
        let k = dlqr(&ad, &bd, &q, &r)?;
        let gain = Matrix2x4::from_fn(|i, j| -k[(i, j)]);
        Ok(Self {
            trim_state: VehicleState::new(mean.x, mean.y, 0.0, v0),
            trim_control,
            gain,
            bounds,
            sampling_time: design.sampling_time,
            t0: 0.0,
            wheelbase,
        })
    }

    /// Constant control with no feedback.
    pub fn open_loop(
        trim_state: VehicleState,
        control: PhysicalControl,
        wheelbase: Wheelbase,
    ) -> Self {
        Self {
            trim_state,
            trim_control: control,
            gain: Matrix2x4::zeros(),
            bounds: ControlBounds {
                accel_min: f64::NEG_INFINITY,
                accel_max: f64::INFINITY,
                steer_min: -1.5,
                steer_max: 1.5,
            },
            sampling_time: 0.05,
            t0: 0.0,
            wheelbase,
        }
    }

    /// Deviation from the trim advanced along the lane by `v₀ (t − t₀)`.
    pub fn error(&self, s: &VehicleState, t: f64) -> [f64; 4] {
        let tr = &self.trim_state;
        [
            s.x - (tr.x + tr.v * (t - self.t0)),
            s.y - tr.y,
            wrap_angle(s.theta - tr.theta),
            s.v - tr.v,
        ]
    }

    /// Affine feedback before saturation.
    pub fn unsaturated(&self, s: &VehicleState, t: f64) -> PhysicalControl {
        let e = self.error(s, t);
        let row = |r: usize| (0..4).map(|j| self.gain[(r, j)] * e[j]).sum::<f64>();
        PhysicalControl::new(
            self.trim_control.accel + row(0),
            self.trim_control.steer + row(1),
        )
    }

    pub fn eval(&self, s: &VehicleState, t: f64) -> PhysicalControl {
        self.bounds.clamp(self.unsaturated(s, t))
    }
}

/// Vector field whose characteristics carry a particle and its log-density.
pub trait ClosedLoopField: Sync {
    fn rhs(&self, s: &[f64; 4], t: f64) -> [f64; 4];
    fn divergence(&self, s: &[f64; 4], t: f64) -> f64;
}

/// Bicycle model in feedback with a [`NominalPolicy`].
#[derive(Debug, Clone)]
pub struct BicycleClosedLoop {
    pub policy: NominalPolicy,
}

const FD_STEP: f64 = 1e-5;

impl BicycleClosedLoop {
    pub fn new(policy: NominalPolicy) -> Self {
        Self { policy }
    }

    /// Divergence by central differences, step `1e-5` scaled by the coordinate.
    pub fn divergence_fd(&self, s: &[f64; 4], t: f64) -> f64 {
        (0..4)
            .map(|k| {
                let h = FD_STEP * s[k].abs().max(1.0);
                let mut plus = *s;
                let mut minus = *s;
                plus[k] += h;
                minus[k] -= h;
                (self.rhs(&plus, t)[k] - self.rhs(&minus, t)[k]) / (2.0 * h)
            })
            .sum()
    }

    /// Divergence on the affine branch; `None` when a channel sits within one
    /// finite-difference stencil of its saturation bound.
    pub fn divergence_analytic(&self, s: &[f64; 4], t: f64) -> Option<f64> {
        let p = &self.policy;
        let state = VehicleState::from_array(*s);
        let raw = p.unsaturated(&state, t);
        let b = &p.bounds;
        let near = |value: f64, lo: f64, hi: f64, slope: f64, coord: f64| {
            let reach = slope.abs() * FD_STEP * coord.abs().max(1.0);
            (value - lo).abs() <= reach || (value - hi).abs() <= reach
        };
        if near(raw.accel, b.accel_min, b.accel_max, p.gain[(0, 3)], s[3])
            || near(raw.steer, b.steer_min, b.steer_max, p.gain[(1, 2)], s[2])
        {
            return None;
        }
        let mut div = 0.0;
        if raw.accel > b.accel_min && raw.accel < b.accel_max {
            div += p.gain[(0, 3)];
        }
        if raw.steer > b.steer_min && raw.steer < b.steer_max {
            let sec2 = 1.0 / raw.steer.cos().powi(2);
            div += s[3] / p.wheelbase.get() * sec2 * p.gain[(1, 2)];
        }
        Some(div)
    }
}

impl ClosedLoopField for BicycleClosedLoop {
    fn rhs(&self, s: &[f64; 4], t: f64) -> [f64; 4] {
        let state = VehicleState::from_array(*s);
        let u = self.policy.eval(&state, t);
        bicycle_rhs_unchecked(&state, &u, self.policy.wheelbase)
    }

    fn divergence(&self, s: &[f64; 4], t: f64) -> f64 {
        self.divergence_analytic(s, t)
            .unwrap_or_else(|| self.divergence_fd(s, t))
    }
}

/// `∇ₓ · f(x, π(x, t))` for the bicycle closed loop.
pub fn closed_loop_divergence(policy: &NominalPolicy, s: &VehicleState, t: f64) -> f64 {
    BicycleClosedLoop::new(policy.clone()).divergence(&s.to_array(), t)
}

/// Affine field `ẋ = A (x − c)`, mainly as an exactly solvable test harness.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub matrix: nalgebra::Matrix4<f64>,
    pub center: [f64; 4],
}

impl ClosedLoopField for LinearField {
    fn rhs(&self, s: &[f64; 4], _t: f64) -> [f64; 4] {
        let d = nalgebra::Vector4::from_fn(|i, _| s[i] - self.center[i]);
        let r = self.matrix * d;
        [r[0], r[1], r[2], r[3]]
    }

    fn divergence(&self, _s: &[f64; 4], _t: f64) -> f64 {
        self.matrix.trace()
    }
}
