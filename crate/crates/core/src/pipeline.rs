//! Stage orchestration. Every stage reads what earlier stages wrote to the
//! output directory, so any of them can be re-run on its own.
//!
//! ```text
//! out/
//!   forecasts/<vehicle>.csv   predict
//!   risk.json                 assess
//!   bridge.json, ensemble.csv steer
//!   report.json               run
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bridge::{
    build_log_kernel, endpoint_measures, fixed_point, map_back_trajectories, simulate_controlled,
    write_ensemble_csv, BridgeProblem, BridgeSolution,
};
use crate::gramian::RelativeDegree;
use crate::liouville::{make_policy, propagate_cloud, sample_cloud, CloudTrajectory};
use crate::policy::{BicycleClosedLoop, ControlBounds};
use crate::risk::{select_maneuver, ManeuverDecision, VehicleForecast};
use crate::scenario::ScenarioConfig;
use crate::{Error, Result};

/// File locations below an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn forecast(&self, id: &str) -> PathBuf {
        self.root.join("forecasts").join(format!("{id}.csv"))
    }

    pub fn risk(&self) -> PathBuf {
        self.root.join("risk.json")
    }

    pub fn bridge(&self) -> PathBuf {
        self.root.join("bridge.json")
    }

    pub fn ensemble(&self) -> PathBuf {
        self.root.join("ensemble.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

/// Forecasts every vehicle of the scene and writes one CSV per vehicle.
pub fn run_predict(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<VehicleForecast>> {
    let layout = Layout::new(out);
    let bounds = ControlBounds::default();
    let steps = cfg.steps;
    let mut forecasts = Vec::with_capacity(cfg.vehicles.len());
    for (k, v) in cfg.vehicles.iter().enumerate() {
        let spec = v.spec()?;
        let cloud = sample_cloud(&spec, cfg.particles, cfg.vehicle_seed(k))?;
        let field = BicycleClosedLoop::new(make_policy(&spec, bounds, cfg.wheelbase())?);
        let trajectory = propagate_cloud(
            &cloud,
            &field,
            cfg.horizon_s,
            steps.forecast_dt_s,
            steps.snapshot_dt_s,
        )?;
        trajectory.write_csv(create(&layout.forecast(&v.id))?)?;
        forecasts.push(VehicleForecast {
            id: v.id.clone(),
            lane: v.lane.clone(),
            trajectory,
        });
    }
    Ok(forecasts)
}

/// Reads the forecasts written by [`run_predict`].
pub fn load_forecasts(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<VehicleForecast>> {
    let layout = Layout::new(out);
    cfg.vehicles
        .iter()
        .map(|v| {
            Ok(VehicleForecast {
                id: v.id.clone(),
                lane: v.lane.clone(),
                trajectory: CloudTrajectory::read_csv(open(&layout.forecast(&v.id))?)?,
            })
        })
        .collect()
}

/// Decides the manoeuvre from persisted forecasts and writes `risk.json`.
pub fn run_assess(cfg: &ScenarioConfig, out: &Path) -> Result<ManeuverDecision> {
    let forecasts = load_forecasts(cfg, out)?;
    let decision = select_maneuver(&cfg.lanes, &forecasts, &cfg.ego, &cfg.assess_config())?;
    serde_json::to_writer_pretty(create(&Layout::new(out).risk())?, &decision)?;
    Ok(decision)
}

/// Summary of the steering stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerSummary {
    pub converged: bool,
    pub iterations: usize,
    pub final_gap: f64,
    pub boundary_residuals: [f64; 2],
    /// Mean of the simulated terminal flat states.
    pub terminal_mean_flat: Vec<f64>,
    /// Mean of the target density in flat coordinates.
    pub target_mean_flat: Vec<f64>,
}

/// Solves the bridge from the ego's initial cloud to the decided target and
/// simulates the steered ensemble. Writes `bridge.json` and `ensemble.csv`.
///
/// A fixed point that does not converge within the budget is reported as an
/// error after the partial solution has been written.
pub fn run_steer(cfg: &ScenarioConfig, out: &Path) -> Result<SteerSummary> {
    let layout = Layout::new(out);
    let decision: ManeuverDecision = serde_json::from_reader(open(&layout.risk())?)?;
    let ego = CloudTrajectory::read_csv(open(&layout.forecast(&cfg.ego))?)?;
    let (sigma0, sigma_t) = endpoint_measures(ego.initial(), &decision.terminal_pdf)?;
    let problem = BridgeProblem::new(
        sigma0,
        sigma_t,
        cfg.epsilon,
        cfg.horizon_s,
        RelativeDegree::bicycle(),
    )?;
    let kernel = build_log_kernel(&problem)?;
    let factors = fixed_point(
        &problem,
        &kernel,
        cfg.solver.bridge_tol,
        cfg.solver.bridge_max_iter,
    )?;
    let (r0, rt) = factors.boundary_residuals(&problem, &kernel);
    let solution = BridgeSolution {
        problem,
        factors,
        boundary_residuals: [r0, rt],
    };
    serde_json::to_writer_pretty(create(&layout.bridge())?, &solution)?;
    let BridgeSolution {
        problem, factors, ..
    } = solution;
    if !factors.converged {
        return Err(Error::NonConvergence {
            solver: "bridge fixed point",
            iterations: factors.iterations,
            gap: factors.final_gap,
        });
    }

    let ensemble = simulate_controlled(
        &problem,
        &factors,
        cfg.simulations,
        cfg.steps.sde_dt_s,
        cfg.seeds.simulation,
    )?;
    let physical = map_back_trajectories(&ensemble, cfg.wheelbase())?;
    write_ensemble_csv(create(&layout.ensemble())?, &ensemble, &physical)?;

    let terminal = ensemble.terminal();
    let n = problem.degree.dim();
    let terminal_mean_flat = (0..n)
        .map(|k| terminal.iter().map(|z| z[k]).sum::<f64>() / terminal.len() as f64)
        .collect();
    Ok(SteerSummary {
        converged: factors.converged,
        iterations: factors.iterations,
        final_gap: factors.final_gap,
        boundary_residuals: [r0, rt],
        terminal_mean_flat,
        target_mean_flat: problem.sigma_t.mean(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub predict_s: f64,
    pub assess_s: f64,
    pub steer_s: f64,
    pub total_s: f64,
}

/// Everything produced by a full run. All referenced files exist when the
/// report is written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub decision: ManeuverDecision,
    pub forecasts: BTreeMap<String, PathBuf>,
    pub risk: PathBuf,
    pub bridge: PathBuf,
    pub ensemble: PathBuf,
    pub steer: SteerSummary,
    pub timings: Timings,
}

/// Predict, assess and steer in sequence, then write `report.json`.
pub fn run_full(cfg: &ScenarioConfig, out: &Path) -> Result<RunReport> {
    let layout = Layout::new(out);
    let start = Instant::now();
    run_predict(cfg, out)?;
    let predict_s = start.elapsed().as_secs_f64();
    let decision = run_assess(cfg, out)?;
    let assess_s = start.elapsed().as_secs_f64() - predict_s;
    let steer = run_steer(cfg, out)?;
    let total_s = start.elapsed().as_secs_f64();
    let report = RunReport {
        scenario: cfg.name.clone(),
        decision,
        forecasts: cfg
            .vehicles
            .iter()
            .map(|v| (v.id.clone(), layout.forecast(&v.id)))
            .collect(),
        risk: layout.risk(),
        bridge: layout.bridge(),
        ensemble: layout.ensemble(),
        steer,
        timings: Timings {
            predict_s,
            assess_s,
            steer_s: total_s - predict_s - assess_s,
            total_s,
        },
    };
    serde_json::to_writer_pretty(create(&layout.report())?, &report)?;
    Ok(report)
}
