//! Kinematic bicycle model and its exact linearisation.
//!
//! Taking the position `(x, y)` as flat output, the endogenous transformation
//! `τ(x, y, θ, v) = (x, v cos θ, y, v sin θ)` turns the bicycle model into two
//! double integrators driven by the flat control `ũ`. Everything here is pure
//! and singular only at zero speed.

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::numeric::wrap_angle;
use crate::{Error, Result};

/// Physical state of one car: position `[m]`, heading `[rad]`, speed `[m/s]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl VehicleState {
    pub const fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.theta, self.v]
    }

    /// True when the state lies where the flatness map is a diffeomorphism.
    pub fn is_valid(&self) -> bool {
        self.v > 0.0 && self.v.is_finite() && self.x.is_finite() && self.y.is_finite()
    }

    fn check(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "speed must be positive, got v = {}",
                self.v
            )))
        }
    }
}

/// Acceleration `[m/s²]` and steering angle `[rad]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalControl {
    pub accel: f64,
    pub steer: f64,
}

impl PhysicalControl {
    pub const ZERO: Self = Self::new(0.0, 0.0);

    pub const fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }

    fn check(&self) -> Result<()> {
        if self.steer.abs() < std::f64::consts::FRAC_PI_2 && self.accel.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "steering angle must satisfy |φ| < π/2, got {}",
                self.steer
            )))
        }
    }
}

/// Brunovsky coordinates `(x, ẋ, y, ẏ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatState(pub Vector4<f64>);

impl FlatState {
    pub fn new(z1: f64, z2: f64, z3: f64, z4: f64) -> Self {
        Self(Vector4::new(z1, z2, z3, z4))
    }

    pub fn speed_squared(&self) -> f64 {
        self.0[1] * self.0[1] + self.0[3] * self.0[3]
    }

    pub fn is_singular(&self) -> bool {
        self.speed_squared() == 0.0
    }
}

/// Flat control `ũ = (ẍ, ÿ)` `[m/s²]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatControl(pub Vector2<f64>);

/// Distance between the front and rear axles `[m]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wheelbase(f64);

impl Wheelbase {
    pub fn new(length_m: f64) -> Result<Self> {
        if length_m > 0.0 && length_m.is_finite() {
            Ok(Self(length_m))
        } else {
            Err(Error::InvalidArgument(format!(
                "wheelbase must be positive, got {length_m}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Wheelbase {
    fn default() -> Self {
        Self(4.0)
    }
}

/// Right-hand side of the kinematic bicycle model.
pub fn bicycle_rhs(s: &VehicleState, u: &PhysicalControl, l: Wheelbase) -> Result<[f64; 4]> {
    s.check()?;
    u.check()?;
    Ok(bicycle_rhs_unchecked(s, u, l))
}

pub(crate) fn bicycle_rhs_unchecked(
    s: &VehicleState,
    u: &PhysicalControl,
    l: Wheelbase,
) -> [f64; 4] {
    let (sin, cos) = s.theta.sin_cos();
    [s.v * cos, s.v * sin, s.v / l.0 * u.steer.tan(), u.accel]
}

pub fn to_flat(s: &VehicleState) -> Result<FlatState> {
    s.check()?;
    let (sin, cos) = s.theta.sin_cos();
    Ok(FlatState::new(s.x, s.v * cos, s.y, s.v * sin))
}

pub fn from_flat(z: &FlatState) -> Result<VehicleState> {
    if z.is_singular() || !z.0.iter().all(|c| c.is_finite()) {
        return Err(Error::Domain("flat velocity (z2, z4) is zero".into()));
    }
    let theta = wrap_angle(z.0[3].atan2(z.0[1]));
    Ok(VehicleState::new(
        z.0[0],
        z.0[2],
        theta,
        z.speed_squared().sqrt(),
    ))
}

/// Flat control produced by a physical control at a given state.
pub fn flat_control_from_physical(
    s: &VehicleState,
    u: &PhysicalControl,
    l: Wheelbase,
) -> Result<FlatControl> {
    s.check()?;
    u.check()?;
    let (sin, cos) = s.theta.sin_cos();
    let lateral = s.v * s.v / l.0 * u.steer.tan();
    Ok(FlatControl(Vector2::new(
        u.accel * cos - lateral * sin,
        u.accel * sin + lateral * cos,
    )))
}

/// Inverse of [`flat_control_from_physical`] given the flat state.
pub fn physical_control_from_flat(
    z: &FlatState,
    u: &FlatControl,
    l: Wheelbase,
) -> Result<PhysicalControl> {
    let sq = z.speed_squared();
    if sq == 0.0 {
        return Err(Error::Domain("flat velocity (z2, z4) is zero".into()));
    }
    let (vx, vy) = (z.0[1], z.0[3]);
    let speed = sq.sqrt();
    let accel = (vx * u.0[0] + vy * u.0[1]) / speed;
    let steer = (l.0 * (vx * u.0[1] - vy * u.0[0]) / (sq * speed)).atan();
    Ok(PhysicalControl::new(accel, steer))
}

/// `det ∇τ` at `τ⁻¹(z)`, i.e. the speed. Zero marks a singular point.
pub fn jacobian_det(z: &FlatState) -> f64 {
    z.speed_squared().sqrt()
}

/// Log of the pushed-forward density `τ♯ξ` at `z`, given `log ξ(τ⁻¹(z))`.
pub fn pushforward_log_density(log_xi: f64, z: &FlatState) -> Result<f64> {
    let sq = z.speed_squared();
    if sq == 0.0 {
        return Err(Error::Domain(
            "pushforward undefined at zero flat velocity".into(),
        ));
    }
    Ok(log_xi - 0.5 * sq.ln())
}

/// Right-hand side of the Brunovsky form `ż = A z + B ũ` for two double integrators.
pub fn brunovsky_rhs(z: &FlatState, u: &FlatControl) -> Vector4<f64> {
    Vector4::new(z.0[1], u.0[0], z.0[3], u.0[1])
}
