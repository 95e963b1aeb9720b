//! Scenario files: lanes, vehicles with Gaussian beliefs, and the numerical
//! settings of every stage. Field names carry their units.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barycenter::BarycenterConfig;
use crate::flatness::Wheelbase;
use crate::liouville::GaussianSpec;
use crate::risk::{AssessConfig, CollisionGeometry, Lane};
use crate::{Error, Result};

/// Mean state with explicit units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanState {
    pub x_m: f64,
    pub y_m: f64,
    pub theta_rad: f64,
    pub v_mps: f64,
}

/// One vehicle. The covariance is given either by its diagonal or in full, in
/// the SI units of `(x, y, θ, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    pub id: String,
    pub lane: String,
    pub mean: MeanState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_diag_si: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_si: Option<[[f64; 4]; 4]>,
}

impl VehicleConfig {
    pub fn spec(&self) -> Result<GaussianSpec> {
        let m = self.mean;
        let mean = [m.x_m, m.y_m, m.theta_rad, m.v_mps];
        match (&self.covariance_diag_si, &self.covariance_si) {
            (Some(d), None) => Ok(GaussianSpec::diagonal(mean, *d)),
            (None, Some(c)) => Ok(GaussianSpec {
                mean,
                covariance: *c,
            }),
            _ => Err(Error::Config(format!(
                "vehicle `{}`: give exactly one of `covariance_diag_si` and `covariance_si`",
                self.id
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub sampling: u64,
    pub simulation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            sampling: 1,
            simulation: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSizes {
    /// RK4 step of the forecasts.
    pub forecast_dt_s: f64,
    /// Spacing of stored forecast snapshots.
    pub snapshot_dt_s: f64,
    /// Time step of the controlled simulation.
    pub sde_dt_s: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            forecast_dt_s: 0.01,
            snapshot_dt_s: 0.1,
            sde_dt_s: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub bridge_tol: f64,
    pub bridge_max_iter: usize,
    pub barycenter_eps: f64,
    pub barycenter_tol: f64,
    pub barycenter_max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let b = BarycenterConfig::default();
        Self {
            bridge_tol: 1e-4,
            bridge_max_iter: 1000,
            barycenter_eps: b.eps,
            barycenter_tol: b.tol,
            barycenter_max_iter: b.max_iter,
        }
    }
}

fn default_horizon() -> f64 {
    2.0
}
fn default_particles() -> usize {
    200
}
fn default_simulations() -> usize {
    500
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_wheelbase() -> f64 {
    4.0
}
fn default_threshold() -> f64 {
    0.01
}
fn default_lanes() -> Vec<Lane> {
    [("left", 3.7), ("middle", 0.0), ("right", -3.7)]
        .into_iter()
        .map(|(id, c)| Lane {
            id: id.into(),
            center_m: c,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    /// Lanes ordered from left to right.
    #[serde(default = "default_lanes")]
    pub lanes: Vec<Lane>,
    pub ego: String,
    pub vehicles: Vec<VehicleConfig>,
    #[serde(default = "default_wheelbase")]
    pub wheelbase_m: f64,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_simulations")]
    pub simulations: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub steps: StepSizes,
    /// Defaults to a `wheelbase × 2 m` rectangle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collision: Option<CollisionGeometry>,
    #[serde(default = "default_threshold")]
    pub risk_threshold: f64,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return bad(format!(
                "horizon_s must be positive, got {}",
                self.horizon_s
            ));
        }
        if self.particles == 0 || self.simulations == 0 {
            return bad("particles and simulations must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Wheelbase::new(self.wheelbase_m).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(g) = self.collision {
            CollisionGeometry::new(g.longitudinal_m, g.lateral_m)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let s = &self.steps;
        if ![s.forecast_dt_s, s.snapshot_dt_s, s.sde_dt_s]
            .iter()
            .all(|d| *d > 0.0 && d.is_finite())
        {
            return bad("step sizes must be positive".into());
        }
        if self.lanes.is_empty() {
            return bad("at least one lane is required".into());
        }
        let mut ids = HashSet::new();
        for (k, lane) in self.lanes.iter().enumerate() {
            if !ids.insert(lane.id.as_str()) {
                return bad(format!("duplicate lane id `{}`", lane.id));
            }
            if self.lanes[..k].iter().any(|l| l.center_m == lane.center_m) {
                return bad(format!(
                    "lane `{}` shares its centreline with another lane",
                    lane.id
                ));
            }
        }
        let mut vids = HashSet::new();
        for v in &self.vehicles {
            if !vids.insert(v.id.as_str()) {
                return bad(format!("duplicate vehicle id `{}`", v.id));
            }
            if !ids.contains(v.lane.as_str()) {
                return bad(format!(
                    "vehicle `{}` is in unknown lane `{}`",
                    v.id, v.lane
                ));
            }
            v.spec()?
                .validate()
                .map_err(|e| Error::Config(format!("vehicle `{}`: {e}", v.id)))?;
        }
        if !vids.contains(self.ego.as_str()) {
            return bad(format!("ego id `{}` does not name a vehicle", self.ego));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn wheelbase(&self) -> Wheelbase {
        Wheelbase::new(self.wheelbase_m).expect("validated")
    }

    pub fn geometry(&self) -> CollisionGeometry {
        self.collision.unwrap_or(CollisionGeometry {
            longitudinal_m: self.wheelbase_m,
            lateral_m: 2.0,
        })
    }

    pub fn assess_config(&self) -> AssessConfig {
        AssessConfig {
            geometry: self.geometry(),
            barycenter: BarycenterConfig {
                eps: self.solver.barycenter_eps,
                max_iter: self.solver.barycenter_max_iter,
                tol: self.solver.barycenter_tol,
            },
            risk_threshold: self.risk_threshold,
            ..AssessConfig::default()
        }
    }

    /// Seed of the initial sample for the vehicle at `index`.
    pub fn vehicle_seed(&self, index: usize) -> u64 {
        self.seeds
            .sampling
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64 + 1)
    }

    /// The seven-vehicle highway scene shipped with the crate.
    pub fn seven_vehicle() -> Self {
        Self::from_json(SEVEN_VEHICLE).expect("shipped scenario is valid")
    }
}

pub const SEVEN_VEHICLE: &str = include_str!("../scenarios/seven_vehicle.json");
