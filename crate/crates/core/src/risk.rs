//! Collision risk between forecast `(x, y)` marginals, gap analysis in the
//! neighbouring lanes and the keep-lane / change-lane decision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{wasserstein_barycenter, BarycenterConfig};
use crate::liouville::{marginal_xy, CloudTrajectory};
use crate::measure::DiscreteMeasure;
use crate::{Error, Result};

/// Rectangular proximity event `|Δx| ≤ longitudinal ∧ |Δy| ≤ lateral`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionGeometry {
    pub longitudinal_m: f64,
    pub lateral_m: f64,
}

impl Default for CollisionGeometry {
    fn default() -> Self {
        Self {
            longitudinal_m: 4.0,
            lateral_m: 2.0,
        }
    }
}

impl CollisionGeometry {
    pub fn new(longitudinal_m: f64, lateral_m: f64) -> Result<Self> {
        if !(longitudinal_m > 0.0 && lateral_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "collision thresholds must be positive, got ({longitudinal_m}, {lateral_m})"
            )));
        }
        Ok(Self {
            longitudinal_m,
            lateral_m,
        })
    }

    /// Smallest admissible expected gap, twice the longitudinal threshold.
    pub fn min_gap(&self) -> f64 {
        2.0 * self.longitudinal_m
    }
}

/// Probability that independent draws from `a` and `b` fall inside the
/// collision rectangle, as an exact double sum over the two particle sets.
///
/// Both measures must be two-dimensional `(x, y)` marginals. The reduction order
/// is fixed, so the result does not depend on the thread schedule.
pub fn collision_probability(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    geom: &CollisionGeometry,
) -> Result<f64> {
    if a.dim() != 2 || b.dim() != 2 {
        return Err(Error::InvalidArgument(
            "collision probability needs (x, y) marginals".into(),
        ));
    }
    let (lx, ly) = (geom.longitudinal_m, geom.lateral_m);
    let rows: Vec<f64> = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let p = a.point(i);
            let hit: f64 = b
                .iter_points()
                .zip(b.masses())
                .filter(|(q, _)| (p[0] - q[0]).abs() <= lx && (p[1] - q[1]).abs() <= ly)
                .map(|(_, w)| w)
                .sum();
            a.masses()[i] * hit
        })
        .collect();
    // + 0.0 turns the empty-sum −0 into +0
    Ok((rows.iter().sum::<f64>() + 0.0).clamp(0.0, 1.0))
}

/// Collision probability at every snapshot of two forecasts on the same grid.
pub fn forecast_collision_profile(
    a: &CloudTrajectory,
    b: &CloudTrajectory,
    geom: &CollisionGeometry,
) -> Result<Vec<f64>> {
    let (ta, tb) = (a.times(), b.times());
    if ta.len() != tb.len() || ta.iter().zip(&tb).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(Error::TimeGridMismatch);
    }
    a.snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(ca, cb)| collision_probability(&marginal_xy(ca), &marginal_xy(cb), geom))
        .collect()
}

/// A lane and its lateral centreline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: String,
    pub center_m: f64,
}

/// One vehicle's forecast together with its lane assignment.
#[derive(Debug, Clone)]
pub struct VehicleForecast {
    pub id: String,
    pub lane: String,
    pub trajectory: CloudTrajectory,
}

/// Interior gap between two consecutive vehicles of a lane at the end of the
/// horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub lane: String,
    pub front: String,
    pub back: String,
    pub expected_gap_m: f64,
    pub admissible: bool,
    /// `max(p(bary, front), p(bary, back))`; only evaluated for admissible gaps.
    pub worst_collision_prob: Option<f64>,
}

/// Gaps between longitudinally consecutive vehicles of one lane, ordered from
/// the rear. `vehicles` pairs ids with their terminal expected `x`.
///
/// Only gaps bounded by two vehicles are reported; the open space behind the
/// last and ahead of the first vehicle is never a candidate.
pub fn gap_analysis(
    lane: &str,
    vehicles: &[(String, f64)],
    geom: &CollisionGeometry,
) -> Vec<GapReport> {
    let mut sorted: Vec<&(String, f64)> = vehicles.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    sorted
        .windows(2)
        .map(|w| {
            let gap = w[1].1 - w[0].1;
            GapReport {
                lane: lane.to_string(),
                front: w[1].0.clone(),
                back: w[0].0.clone(),
                expected_gap_m: gap,
                admissible: gap > geom.min_gap(),
                worst_collision_prob: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManeuverChoice {
    Stay,
    Change {
        lane: String,
        front: String,
        back: String,
    },
}

/// Collision probability over time between the ego and one other vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionProfile {
    pub other: String,
    pub times: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// An admissible merge option with its barycentric target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapOption {
    pub lane: String,
    pub front: String,
    pub back: String,
    pub prob_front: f64,
    pub prob_back: f64,
    pub worst_collision_prob: f64,
    /// Mean of the barycenter in flat coordinates.
    pub barycenter_mean: Vec<f64>,
    pub barycenter_iterations: usize,
    pub barycenter: DiscreteMeasure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverDecision {
    pub choice: ManeuverChoice,
    /// Set when even the best available option exceeds the risk threshold.
    pub no_safe_option: bool,
    /// Terminal collision probability against the worst own-lane vehicle.
    pub stay_probability: f64,
    pub options: Vec<GapOption>,
    pub gaps: Vec<GapReport>,
    pub profiles: Vec<CollisionProfile>,
    /// Desired terminal density in flat coordinates.
    pub terminal_pdf: DiscreteMeasure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssessConfig {
    pub geometry: CollisionGeometry,
    pub barycenter: BarycenterConfig,
    /// Probability above which an option counts as unsafe.
    pub risk_threshold: f64,
    /// Barycenter atoms lighter than this are dropped from the target.
    pub prune_mass: f64,
}

impl Default for AssessConfig {
    fn default() -> Self {
        Self {
            geometry: CollisionGeometry::default(),
            barycenter: BarycenterConfig::default(),
            risk_threshold: 0.01,
            prune_mass: 1e-12,
        }
    }
}

const TIE: f64 = 1e-12;

/// Compares the own-lane risk with every admissible gap of the adjacent lanes
/// and returns the safest placement together with its target density.
pub fn select_maneuver(
    lanes: &[Lane],
    forecasts: &[VehicleForecast],
    ego: &str,
    cfg: &AssessConfig,
) -> Result<ManeuverDecision> {
    let ego_fc = forecasts
        .iter()
        .find(|f| f.id == ego)
        .ok_or_else(|| Error::Config(format!("no forecast for ego vehicle `{ego}`")))?;
    let ego_lane = lanes
        .iter()
        .position(|l| l.id == ego_fc.lane)
        .ok_or_else(|| Error::Config(format!("ego lane `{}` is not declared", ego_fc.lane)))?;
    let geom = &cfg.geometry;
    let ego_terminal = ego_fc.trajectory.terminal();

    let mut profiles = Vec::new();
    let mut stay_probability: f64 = 0.0;
    for other in forecasts
        .iter()
        .filter(|f| f.lane == ego_fc.lane && f.id != ego)
    {
        let probabilities =
            forecast_collision_profile(&ego_fc.trajectory, &other.trajectory, geom)?;
        stay_probability = stay_probability.max(*probabilities.last().expect("non-empty profile"));
        profiles.push(CollisionProfile {
            other: other.id.clone(),
            times: ego_fc.trajectory.times(),
            probabilities,
        });
    }

    let mut gaps = Vec::new();
    let mut options = Vec::new();
    for (k, lane) in lanes.iter().enumerate() {
        if k == ego_lane {
            continue;
        }
        let members: Vec<&VehicleForecast> =
            forecasts.iter().filter(|f| f.lane == lane.id).collect();
        let positions: Vec<(String, f64)> = members
            .iter()
            .map(|f| (f.id.clone(), f.trajectory.terminal().mean()[0]))
            .collect();
        let mut lane_gaps = gap_analysis(&lane.id, &positions, geom);
        if k.abs_diff(ego_lane) == 1 {
            for gap in lane_gaps.iter_mut().filter(|g| g.admissible) {
                let find = |id: &str| members.iter().find(|f| f.id == id).expect("gap member");
                let front = find(&gap.front).trajectory.terminal();
                let back = find(&gap.back).trajectory.terminal();
                let bary = wasserstein_barycenter(
                    &front.flat_measure()?,
                    &back.flat_measure()?,
                    &cfg.barycenter,
                )?;
                let target = bary.measure.prune(cfg.prune_mass)?;
                let bary_xy = target.project(&[0, 2]);
                let prob_front = collision_probability(&bary_xy, &marginal_xy(front), geom)?;
                let prob_back = collision_probability(&bary_xy, &marginal_xy(back), geom)?;
                let worst = prob_front.max(prob_back);
                gap.worst_collision_prob = Some(worst);
                options.push(GapOption {
                    lane: lane.id.clone(),
                    front: gap.front.clone(),
                    back: gap.back.clone(),
                    prob_front,
                    prob_back,
                    worst_collision_prob: worst,
                    barycenter_mean: target.mean(),
                    barycenter_iterations: bary.iterations,
                    barycenter: target,
                });
            }
        }
        gaps.extend(lane_gaps);
    }

    let ego_mean = ego_fc.trajectory.initial().mean();
    let distance = |o: &GapOption| {
        let dx = o.barycenter_mean[0] - ego_mean[0];
        let dy = o.barycenter_mean[2] - ego_mean[1];
        dx.hypot(dy)
    };
    let best = options.iter().min_by(|a, b| {
        if (a.worst_collision_prob - b.worst_collision_prob).abs() <= TIE {
            distance(a).total_cmp(&distance(b))
        } else {
            a.worst_collision_prob.total_cmp(&b.worst_collision_prob)
        }
    });

    let (choice, terminal_pdf, chosen_prob) = match best {
        Some(o) if o.worst_collision_prob < stay_probability => (
            ManeuverChoice::Change {
                lane: o.lane.clone(),
                front: o.front.clone(),
                back: o.back.clone(),
            },
            o.barycenter.clone(),
            o.worst_collision_prob,
        ),
        _ => (
            ManeuverChoice::Stay,
            ego_terminal.flat_measure()?,
            stay_probability,
        ),
    };
    Ok(ManeuverDecision {
        choice,
        no_safe_option: chosen_prob > cfg.risk_threshold,
        stay_probability,
        options,
        gaps,
        profiles,
        terminal_pdf,
    })
}
