//! Acceptance checks. Each test prints one `PASS`/`FAIL` line; run with
//! `cargo test --release --test acceptance -- --nocapture --test-threads 1` to see them.

mod support;

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

use density_steer::barycenter::{wasserstein_barycenter, BarycenterConfig};
use density_steer::bench::bench_gramian;
use density_steer::bridge::{
    build_log_kernel, evaluate_factors, fixed_point, hilbert_metric, optimal_control,
    simulate_controlled, BridgeProblem, BridgeSolution,
};
use density_steer::flatness::{
    bicycle_rhs, brunovsky_rhs, flat_control_from_physical, from_flat, physical_control_from_flat,
    to_flat, PhysicalControl, VehicleState, Wheelbase,
};
use density_steer::gramian::{gramian_closed_form, gramian_numeric_oracle, RelativeDegree};
use density_steer::liouville::{propagate_cloud, sample_cloud, GaussianSpec, WeightedCloud};
use density_steer::measure::DiscreteMeasure;
use density_steer::pipeline::{run_full, Layout, RunReport};
use density_steer::policy::{BicycleClosedLoop, ClosedLoopField, LinearField, NominalPolicy};
use density_steer::risk::{collision_probability, CollisionGeometry, ManeuverChoice};
use density_steer::scenario::ScenarioConfig;

// Tolerances and budgets.
const GRAMIAN_REL_TOL: f64 = 1e-8;
const GRAMIAN_BUDGET: Duration = Duration::from_secs(1);
const BENCH_MIN_SPEEDUP: f64 = 2.0;
const BENCH_BUDGET: Duration = Duration::from_secs(120);
// 100 Simpson panels leave ~1e-4 in log κ once the (3,2) inverse amplifies them
const BENCH_ROUTE_TOL: f64 = 1e-3;
const FLAT_ROUND_TRIP_TOL: f64 = 1e-10;
const FLAT_TRAJECTORY_TOL: f64 = 1e-6;
const LIOUVILLE_TOL: f64 = 1e-3;
const BRIDGE_GAP_TOL: f64 = 1e-4;
const BRIDGE_MAX_ITER: usize = 1000;
const BOUNDARY_TOL: f64 = 1e-10;
const COUPLING_TOL: f64 = 1e-6;
const GRADIENT_REL_TOL: f64 = 1e-5;
const DESK_SIGMAS: f64 = 3.0;
const DESK_BUDGET: Duration = Duration::from_secs(120);
const SCENARIO_BUDGET: Duration = Duration::from_secs(300);
const Y_TOL: f64 = 0.5;

fn report(id: &str, what: &str, ok: bool, detail: String) {
    println!(
        "[{}] criterion {id}: {what} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {id} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Closed-form Gramian

fn integer_det(m: &[Vec<i128>]) -> i128 {
    // fraction-free Gaussian elimination
    let n = m.len();
    let mut a = m.to_vec();
    let mut sign = 1;
    let mut prev = 1i128;
    for k in 0..n - 1 {
        if a[k][k] == 0 {
            let Some(r) = (k + 1..n).find(|&r| a[r][k] != 0) else {
                return 0;
            };
            a.swap(k, r);
            sign = -sign;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
            }
        }
        prev = a[k][k];
    }
    sign * a[n - 1][n - 1]
}

fn all_degrees(max_blocks: usize, max_p: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_blocks {
        frontier = frontier
            .iter()
            .flat_map(|d| (1..=max_p).map(move |p| [d.clone(), vec![p]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

#[test]
fn c1_closed_form_gramian() {
    let start = Instant::now();
    let deg = RelativeDegree::new(vec![3, 2]).unwrap();
    let b = gramian_closed_form(&deg, 1.0).unwrap();
    let expected: [[i128; 5]; 5] = [
        [720, -360, 60, 0, 0],
        [-360, 192, -36, 0, 0],
        [60, -36, 9, 0, 0],
        [0, 0, 0, 12, -6],
        [0, 0, 0, -6, 4],
    ];
    let exact = (0..5).all(|i| (0..5).all(|j| b.inverse[(i, j)] == expected[i][j] as f64));
    let rows: Vec<Vec<i128>> = expected.iter().map(|r| r.to_vec()).collect();
    let det_inv = integer_det(&rows);
    let det_from_log = (-b.log_det).exp();

    // The Gramian of a block-diagonal chain is block diagonal, so the oracle is
    // assembled from per-block quadratures (each computed once).
    let mut cache: HashMap<(usize, u64), DMatrix<f64>> = HashMap::new();
    let mut worst_rel: f64 = 0.0;
    let mut worst_inv: f64 = 0.0;
    let mut cases = 0;
    for blocks in all_degrees(3, 5) {
        for delta in [0.5f64, 1.0, 2.0] {
            let deg = RelativeDegree::new(blocks.clone()).unwrap();
            let n = deg.dim();
            let mut oracle = DMatrix::zeros(n, n);
            for (off, p) in deg.block_ranges() {
                let block = cache.entry((p, delta.to_bits())).or_insert_with(|| {
                    gramian_numeric_oracle(&RelativeDegree::new(vec![p]).unwrap(), delta, 10_000)
                });
                oracle.view_mut((off, off), (p, p)).copy_from(block);
            }
            let closed = gramian_closed_form(&deg, delta).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let (c, o) = (closed.gramian[(i, j)], oracle[(i, j)]);
                    let rel = if o == 0.0 {
                        c.abs()
                    } else {
                        ((c - o) / o).abs()
                    };
                    worst_rel = worst_rel.max(rel);
                }
            }
            let prod = &closed.gramian * &closed.inverse;
            worst_inv = worst_inv.max((prod - DMatrix::identity(n, n)).abs().max());
            cases += 1;
        }
    }
    // direct full-dimension quadrature on two mixed cases
    for blocks in [vec![3, 2], vec![5, 4, 3]] {
        let deg = RelativeDegree::new(blocks).unwrap();
        let o = gramian_numeric_oracle(&deg, 2.0, 10_000);
        let c = gramian_closed_form(&deg, 2.0).unwrap().gramian;
        for (x, y) in c.iter().zip(o.iter()) {
            worst_rel = worst_rel.max(if *y == 0.0 {
                x.abs()
            } else {
                ((x - y) / y).abs()
            });
        }
    }
    let elapsed = start.elapsed();
    let ok = exact
        && det_inv == 103_680
        && ((det_from_log - 103_680.0) / 103_680.0).abs() < 1e-12
        && worst_rel < GRAMIAN_REL_TOL
        && worst_inv < GRAMIAN_REL_TOL
        && elapsed < GRAMIAN_BUDGET;
    report(
        "1",
        "closed-form Gramian inverse and determinant",
        ok,
        format!(
            "exact inverse {exact}, det(M⁻¹) = {det_inv} ({det_from_log:.6} from log-det), {cases} cases: max rel err {worst_rel:.2e}, max |MM⁻¹−I| {worst_inv:.2e}, {:.3} s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Kernel benchmark

#[test]
fn c2_kernel_benchmark_speedup() {
    let start = Instant::now();
    let degrees = [
        RelativeDegree::new(vec![2, 2]).unwrap(),
        RelativeDegree::new(vec![3, 2]).unwrap(),
    ];
    let rows = bench_gramian(&degrees, 1.0, 0.5, 5, 100).unwrap();
    let elapsed = start.elapsed();
    let ok = rows
        .iter()
        .all(|r| r.speedup >= BENCH_MIN_SPEEDUP && r.max_log_diff < BENCH_ROUTE_TOL)
        && elapsed < BENCH_BUDGET;
    let detail = rows
        .iter()
        .map(|r| {
            format!(
                "{}: {:.3} s vs {:.3} s, ×{:.1}, max |Δlog κ| {:.1e}",
                r.degree, r.oracle_s, r.closed_form_s, r.speedup, r.max_log_diff
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    report(
        "2",
        "closed-form kernel tables are at least 2× faster",
        ok,
        format!("{detail}; {:.1} s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------------------
// 3. Flatness

fn random_state(r: &mut impl Rng) -> VehicleState {
    VehicleState::new(
        r.random_range(-100.0..100.0),
        r.random_range(-10.0..10.0),
        r.random_range(-3.1..3.1),
        r.random_range(0.5..40.0),
    )
}

#[test]
fn c3_flatness_round_trips() {
    let l = Wheelbase::default();
    let mut r = support::rng(3);
    let mut state_err: f64 = 0.0;
    let mut control_err: f64 = 0.0;
    for _ in 0..10_000 {
        let s = random_state(&mut r);
        let back = from_flat(&to_flat(&s).unwrap()).unwrap();
        let d = [
            back.x - s.x,
            back.y - s.y,
            back.theta - s.theta,
            back.v - s.v,
        ];
        let scale = [s.x.abs(), s.y.abs(), s.theta.abs(), s.v].map(|c| c.max(1.0));
        state_err = state_err.max((0..4).map(|k| d[k].abs() / scale[k]).fold(0.0, f64::max));

        let u = PhysicalControl::new(r.random_range(-3.0..3.0), r.random_range(-0.5..0.5));
        let z = to_flat(&s).unwrap();
        let ut = flat_control_from_physical(&s, &u, l).unwrap();
        let u2 = physical_control_from_flat(&z, &ut, l).unwrap();
        control_err = control_err.max((u2.accel - u.accel).abs().max((u2.steer - u.steer).abs()));
    }

    // trajectory equivalence under piecewise-constant physical controls
    let mut traj_err: f64 = 0.0;
    for _ in 0..20 {
        let s0 = VehicleState::new(
            0.0,
            0.0,
            r.random_range(-0.3..0.3),
            r.random_range(10.0..25.0),
        );
        let controls: Vec<PhysicalControl> = (0..4)
            .map(|_| PhysicalControl::new(r.random_range(-2.0..2.0), r.random_range(-0.05..0.05)))
            .collect();
        let mut x = s0.to_array();
        let z0 = to_flat(&s0).unwrap().0;
        let mut z = [z0[0], z0[1], z0[2], z0[3]];
        for k in 0..200 {
            let u = controls[k / 50];
            x = support::rk4(
                |s| bicycle_rhs(&VehicleState::from_array(*s), &u, l).unwrap(),
                &x,
                0.01,
            );
            z = support::rk4(
                |z| {
                    let zs = density_steer::flatness::FlatState::new(z[0], z[1], z[2], z[3]);
                    let s = from_flat(&zs).unwrap();
                    let ut = flat_control_from_physical(&s, &u, l).unwrap();
                    let d = brunovsky_rhs(&zs, &ut);
                    [d[0], d[1], d[2], d[3]]
                },
                &z,
                0.01,
            );
            let mapped = to_flat(&VehicleState::from_array(x)).unwrap().0;
            traj_err = traj_err.max((0..4).map(|i| (mapped[i] - z[i]).abs()).fold(0.0, f64::max));
        }
    }
    let ok = state_err < FLAT_ROUND_TRIP_TOL
        && control_err < FLAT_ROUND_TRIP_TOL
        && traj_err < FLAT_TRAJECTORY_TOL;
    report(
        "3",
        "flatness maps invert and trajectories agree",
        ok,
        format!("state {state_err:.2e}, control {control_err:.2e} on 10⁴ states; trajectory {traj_err:.2e} over 2 s"),
    );
}

// ---------------------------------------------------------------------------
// 4. Liouville transport

#[test]
fn c4_liouville_transport() {
    #[rustfmt::skip]
    let a = nalgebra::Matrix4::new(
        -0.5,  1.0,  0.0,  0.0,
        -1.0, -0.5,  0.2,  0.0,
         0.0,  0.0, -0.3,  0.4,
         0.1,  0.0, -0.4, -0.8,
    );
    let center = [1.0, -2.0, 0.5, 3.0];
    let spec = GaussianSpec {
        mean: [2.0, -1.0, 0.0, 5.0],
        covariance: [
            [0.5, 0.1, 0.0, 0.0],
            [0.1, 0.3, 0.0, 0.05],
            [0.0, 0.0, 0.2, 0.0],
            [0.0, 0.05, 0.0, 0.4],
        ],
    };
    let cloud = sample_cloud(&spec, 300, 4).unwrap();
    let field = LinearField { matrix: a, center };
    let traj = propagate_cloud(&cloud, &field, 2.0, 0.01, 0.1).unwrap();
    let end = traj.terminal();

    // exact Gaussian at t = 2: mean c + e^{At}(μ−c), covariance e^{At} Σ e^{Aᵀt}
    let e = (a * 2.0).exp();
    let mu = nalgebra::Vector4::from(spec.mean);
    let c = nalgebra::Vector4::from(center);
    let mean_t = c + e * (mu - c);
    let sigma0 = nalgebra::Matrix4::from_fn(|i, j| spec.covariance[i][j]);
    let cov_t = e * sigma0 * e.transpose();
    let cov_inv = cov_t.try_inverse().unwrap();
    let log_norm = -0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + cov_t.determinant().ln());
    let mut worst: f64 = 0.0;
    for (s, l) in end.states.iter().zip(&end.log_densities) {
        let d = nalgebra::Vector4::from(s.to_array()) - mean_t;
        let exact = log_norm - 0.5 * (d.transpose() * cov_inv * d)[0];
        worst = worst.max((exact - l).abs());
    }

    // open-loop bicycle: zero divergence and constant log-density
    let trim = VehicleState::new(0.0, 0.0, 0.0, 20.0);
    let open = BicycleClosedLoop::new(NominalPolicy::open_loop(
        trim,
        PhysicalControl::new(0.5, 0.02),
        Wheelbase::default(),
    ));
    let ego = GaussianSpec::diagonal([0.0, 0.0, 0.0, 22.0], [0.11, 0.44, 2.7e-6, 0.03]);
    let c0: WeightedCloud = sample_cloud(&ego, 200, 5).unwrap();
    let open_traj = propagate_cloud(&c0, &open, 2.0, 0.01, 0.1).unwrap();
    let max_div = open_traj
        .snapshots
        .iter()
        .flat_map(|snap| {
            snap.states
                .iter()
                .map(|s| open.divergence(&s.to_array(), snap.time).abs())
        })
        .fold(0.0, f64::max);
    let constant = open_traj
        .snapshots
        .iter()
        .all(|snap| snap.log_densities == c0.log_densities);

    let ok = worst < LIOUVILLE_TOL && max_div == 0.0 && constant;
    report(
        "4",
        "Liouville transport matches the exact Gaussian; open loop is volume preserving",
        ok,
        format!("max |Δlog ρ| {worst:.2e} at T = 2 s; open-loop max |div| {max_div:e}, log-densities constant: {constant}"),
    );
}

// ---------------------------------------------------------------------------
// Shared end-to-end run of the shipped scenario.

struct ScenarioRun {
    report: RunReport,
    dir: tempfile::TempDir,
    elapsed: Duration,
}

fn scenario_run() -> &'static ScenarioRun {
    static RUN: OnceLock<ScenarioRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig::seven_vehicle();
        let start = Instant::now();
        let report = run_full(&cfg, dir.path()).unwrap();
        ScenarioRun {
            report,
            elapsed: start.elapsed(),
            dir,
        }
    })
}

// ---------------------------------------------------------------------------
// 5. Bridge

fn random_atoms(n: usize, dim: usize, scale: f64, seed: u64) -> DiscreteMeasure {
    let mut r = support::rng(seed);
    let pts = (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| scale * r.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let masses: Vec<f64> = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    let total: f64 = masses.iter().sum();
    DiscreteMeasure::new(pts, masses.iter().map(|m| m / total).collect()).unwrap()
}

#[test]
fn c5a_bridge_converges_on_scenario() {
    let run = scenario_run();
    let s = &run.report.steer;
    let ok = s.converged && s.final_gap < BRIDGE_GAP_TOL && s.iterations <= BRIDGE_MAX_ITER;
    report(
        "5a",
        "bridge fixed point converges on the shipped scenario",
        ok,
        format!(
            "{} iterations, final Hilbert gap {:.2e}",
            s.iterations, s.final_gap
        ),
    );
}

#[test]
fn c5b_boundary_residuals() {
    let run = scenario_run();
    let text = std::fs::read_to_string(Layout::new(run.dir.path()).bridge()).unwrap();
    let solution: BridgeSolution = serde_json::from_str(&text).unwrap();
    let kernel = build_log_kernel(&solution.problem).unwrap();
    let default_res = solution.boundary_residuals;
    // the default stopping rule bounds the change between iterates, not the
    // marginal error, so the residual bound is checked on a run to a tight gap
    let tight = fixed_point(&solution.problem, &kernel, 1e-13, 20_000).unwrap();
    let (r0, rt) = tight.boundary_residuals(&solution.problem, &kernel);
    let ok = tight.converged && r0 <= BOUNDARY_TOL && rt <= BOUNDARY_TOL;
    report(
        "5b",
        "boundary conditions hold at the fixed point",
        ok,
        format!(
            "gap 1e-13 after {} iterations: residuals {r0:.2e} / {rt:.2e}; at the default gap 1e-4: {:.2e} / {:.2e}",
            tight.iterations, default_res[0], default_res[1]
        ),
    );
}

#[test]
fn c5c_coupling_matches_entropic_ot() {
    let deg = RelativeDegree::new(vec![2, 2]).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let a = random_atoms(10, 4, 1.0, 100 + seed);
        let b = random_atoms(10, 4, 1.0, 200 + seed);
        let p = BridgeProblem::new(a.clone(), b.clone(), 0.5, 1.0, deg.clone()).unwrap();
        let k = build_log_kernel(&p).unwrap();
        let f = fixed_point(&p, &k, 1e-13, 100_000).unwrap();
        assert!(f.converged);
        let coupling = f.coupling(&k);
        let cost = DMatrix::from_fn(10, 10, |i, j| -2.0 * 0.5 * k.get(i, j));
        let reference = support::entropic_ot(&cost, a.masses(), b.masses(), 2.0 * 0.5, 1e-14);
        for i in 0..10 {
            for j in 0..10 {
                worst = worst.max((coupling[i * 10 + j] - reference[(i, j)]).abs());
            }
        }
    }
    report(
        "5c",
        "static coupling equals the entropic optimal transport plan",
        worst < COUPLING_TOL,
        format!("5 instances of 10×10 atoms, max entry difference {worst:.2e}"),
    );
}

#[test]
fn c5d_control_gradient() {
    let deg = RelativeDegree::new(vec![2, 2]).unwrap();
    let a = random_atoms(15, 4, 2.0, 7);
    let b = random_atoms(12, 4, 2.0, 8)
        .map_points(|p| vec![p[0] + 10.0, p[1] + 1.0, p[2] - 3.0, p[3]])
        .unwrap();
    let p = BridgeProblem::new(a, b, 0.1, 2.0, deg).unwrap();
    let k = build_log_kernel(&p).unwrap();
    let f = fixed_point(&p, &k, 1e-10, 10_000).unwrap();
    let mut r = support::rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let t = r.random_range(0.0..1.9);
        let z: Vec<f64> = (0..4)
            .map(|i| r.random_range(-2.0..2.0) + [5.0, 0.5, -1.5, 0.0][i])
            .collect();
        let field = density_steer::bridge::ControlField::new(&f, &p, t).unwrap();
        let g = field.grad_log_phi(&z);
        let fd: Vec<f64> = (0..4)
            .map(|i| {
                let h = 1e-5 * z[i].abs().max(1.0);
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let lp = evaluate_factors(&f, &p, &zp, t).unwrap().1;
                let lm = evaluate_factors(&f, &p, &zm, t).unwrap().1;
                (lp - lm) / (2.0 * h)
            })
            .collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / norm);
        // the control is the input rows of 2ε∇log φ
        let u = optimal_control(&f, &p, &z, t).unwrap();
        assert!((u[0] - 0.2 * g[1]).abs() < 1e-12 * u[0].abs().max(1.0));
        assert!((u[1] - 0.2 * g[3]).abs() < 1e-12 * u[1].abs().max(1.0));
    }
    report(
        "5d",
        "analytic control gradient matches finite differences",
        worst < GRADIENT_REL_TOL,
        format!("50 random (z, t), max relative error {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 6. Gaussian-to-Gaussian transfer

#[test]
fn c6_gaussian_density_transfer() {
    let start = Instant::now();
    let deg = RelativeDegree::new(vec![2, 2]).unwrap();
    let l0 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.4, 0.3, 0.4, 0.2]));
    let lt = DMatrix::from_diagonal(&DVector::from_vec(vec![0.8, 0.4, 0.3, 0.15]));
    let sigma0 = DiscreteMeasure::uniform(support::gaussian_samples(
        &[0.0, 20.0, 0.0, 0.0],
        &l0,
        200,
        61,
    ))
    .unwrap();
    let sigma_t = DiscreteMeasure::uniform(support::gaussian_samples(
        &[45.0, 19.0, -3.7, 0.0],
        &lt,
        200,
        62,
    ))
    .unwrap();
    let p = BridgeProblem::new(sigma0, sigma_t, 0.1, 2.0, deg).unwrap();
    let k = build_log_kernel(&p).unwrap();
    let f = fixed_point(&p, &k, 1e-4, 1000).unwrap();
    let n_sim = 500;
    let ens = simulate_controlled(&p, &f, n_sim, 0.005, 11).unwrap();
    let again = simulate_controlled(&p, &f, n_sim, 0.005, 11).unwrap();
    let repeatable = ens == again;

    let pts: Vec<Vec<f64>> = p.sigma_t.iter_points().map(|q| q.to_vec()).collect();
    let (mt, ct) = support::moments(&pts, p.sigma_t.masses());
    let terminal = ens.terminal().to_vec();
    let (me, ce) = support::moments(&terminal, &vec![1.0 / n_sim as f64; n_sim]);
    let nf = n_sim as f64;
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        worst = worst.max((me[i] - mt[i]).abs() / (ct[(i, i)] / nf).sqrt());
        for j in i..4 {
            let se = ((ct[(i, i)] * ct[(j, j)] + ct[(i, j)].powi(2)) / nf).sqrt();
            worst = worst.max((ce[(i, j)] - ct[(i, j)]).abs() / se);
        }
    }
    let elapsed = start.elapsed();
    let ok = f.converged && repeatable && worst <= DESK_SIGMAS && elapsed < DESK_BUDGET;
    report(
        "6",
        "steered ensemble reproduces the target moments",
        ok,
        format!(
            "{} iterations, worst moment deviation {worst:.2} standard errors, repeatable {repeatable}, {:.1} s",
            f.iterations,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Scenario reproduction

#[test]
fn c7_scenario_reproduction() {
    let run = scenario_run();
    let d = &run.report.decision;
    let profile = &d
        .profiles
        .iter()
        .find(|p| p.other == "A")
        .unwrap()
        .probabilities;
    let non_decreasing = profile.windows(2).all(|w| w[1] >= w[0]);
    let p_end = *profile.last().unwrap();
    let right_best = d
        .options
        .iter()
        .filter(|o| o.lane == "right")
        .map(|o| o.worst_collision_prob)
        .fold(0.0, f64::max);
    let right_exists = d.options.iter().any(|o| o.lane == "right");
    let increasing = non_decreasing && p_end > profile[0];
    let choice_ok = d.choice
        == ManeuverChoice::Change {
            lane: "right".into(),
            front: "R2".into(),
            back: "R1".into(),
        };

    let layout = Layout::new(run.dir.path());
    let mean_x = |id: &str| {
        let t = density_steer::liouville::CloudTrajectory::read_csv(
            std::fs::File::open(layout.forecast(id)).unwrap(),
        )
        .unwrap();
        t.terminal().mean()[0]
    };
    let (r1, r2) = (mean_x("R1"), mean_x("R2"));
    let m = &run.report.steer.terminal_mean_flat;
    let (x, y) = (m[0], m[2]);
    let placed = x > r1 && x < r2 && (y + 3.7).abs() <= Y_TOL;
    let ok = increasing
        && right_exists
        && p_end > right_best
        && choice_ok
        && placed
        && run.elapsed < SCENARIO_BUDGET;
    report(
        "7",
        "shipped scenario: unsafe own lane, merge right between R1 and R2",
        ok,
        format!(
            "ego–A profile {:.3} → {p_end:.3} (non-decreasing {non_decreasing}), best right option {right_best:.2e}, choice {:?}, terminal mean ({x:.2}, {y:.3}) with R1 at {r1:.2} and R2 at {r2:.2}, {:.1} s",
            profile[0],
            d.choice,
            run.elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Property suites

fn cloud2(pts: &[(f64, f64)]) -> DiscreteMeasure {
    DiscreteMeasure::uniform(pts.iter().map(|&(x, y)| vec![x, y]).collect()).unwrap()
}

#[test]
fn c8_property_suites() {
    let mut runner = TestRunner::new(Config {
        cases: 64,
        failure_persistence: None,
        ..Config::default()
    });
    let geom = CollisionGeometry::default();
    let pts = proptest::collection::vec((-20.0..20.0f64, -5.0..5.0f64), 1..40);

    let collision = runner.run(&(pts.clone(), pts.clone()), |(a, b)| {
        let (ma, mb) = (cloud2(&a), cloud2(&b));
        let pab = collision_probability(&ma, &mb, &geom).unwrap();
        let pba = collision_probability(&mb, &ma, &geom).unwrap();
        prop_assert!((0.0..=1.0).contains(&pab));
        prop_assert!((pab - pba).abs() < 1e-12);
        // growing the collision rectangle never lowers the probability
        let mut last = 0.0;
        for k in 1..=8 {
            let g = CollisionGeometry::new(0.5 * k as f64, 0.25 * k as f64).unwrap();
            let p = collision_probability(&ma, &mb, &g).unwrap();
            prop_assert!(p >= last - 1e-12);
            last = p;
        }
        // a single vehicle pulling away along x
        let mut last = f64::INFINITY;
        for k in 0..12 {
            let p = collision_probability(
                &cloud2(&[a[0]]),
                &cloud2(&[(a[0].0 + k as f64, a[0].1)]),
                &geom,
            )
            .unwrap();
            prop_assert!(p <= last);
            last = p;
        }
        Ok(())
    });

    // Monte Carlo oracle for two unit Gaussian clouds offset by (4, 0)
    let eye = DMatrix::identity(2, 2);
    let ga = support::gaussian_samples(&[0.0, 0.0], &eye, 2000, 81);
    let gb = support::gaussian_samples(&[4.0, 0.0], &eye, 2000, 82);
    let exact = collision_probability(
        &DiscreteMeasure::uniform(ga.clone()).unwrap(),
        &DiscreteMeasure::uniform(gb.clone()).unwrap(),
        &geom,
    )
    .unwrap();
    let mc = support::collision_monte_carlo(&ga, &gb, 4.0, 2.0, 1_000_000, 83);
    let mc_ok = (exact - mc).abs() < 0.01;

    let cfg = BarycenterConfig::default();
    let atoms = proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 4), 1..12);
    let bary = runner.run(&atoms, |pts| {
        let m = DiscreteMeasure::uniform(pts).unwrap().merge_duplicates();
        let b = wasserstein_barycenter(&m, &m, &cfg).unwrap();
        let tv = b.measure.total_variation_same_support(&m);
        prop_assert!(matches!(tv, Some(v) if v < 1e-6), "tv = {tv:?}");
        Ok(())
    });
    let diracs = runner.run(
        &(
            proptest::collection::vec(-30.0..30.0f64, 4),
            proptest::collection::vec(-30.0..30.0f64, 4),
        ),
        |(p, q)| {
            let b = wasserstein_barycenter(
                &DiscreteMeasure::dirac(p.clone()).unwrap(),
                &DiscreteMeasure::dirac(q.clone()).unwrap(),
                &cfg,
            )
            .unwrap();
            let mid: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            let mean = b.measure.mean();
            prop_assert!(mean
                .iter()
                .zip(&mid)
                .all(|(a, b)| (a - b).abs() < 1e-9 * b.abs().max(1.0)));
            Ok(())
        },
    );

    let pos = proptest::collection::vec(0.01..100.0f64, 5);
    let hilbert = runner.run(
        &(pos.clone(), pos.clone(), pos, 0.01..100.0f64),
        |(p, q, w, c)| {
            let d = |a: &[f64], b: &[f64]| hilbert_metric(a, b).unwrap();
            prop_assert!(d(&p, &q) >= 0.0);
            prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-12);
            prop_assert!(d(&p, &w) <= d(&p, &q) + d(&q, &w) + 1e-12);
            let scaled: Vec<f64> = p.iter().map(|x| c * x).collect();
            prop_assert!(d(&p, &scaled) < 1e-12);
            if p.iter()
                .zip(&q)
                .any(|(a, b)| (a / b - p[0] / q[0]).abs() > 1e-9 * (p[0] / q[0]))
            {
                prop_assert!(d(&p, &q) > 0.0);
            }
            Ok(())
        },
    );

    let ok = collision.is_ok() && mc_ok && bary.is_ok() && diracs.is_ok() && hilbert.is_ok();
    report(
        "8",
        "collision, barycenter and Hilbert-metric properties",
        ok,
        format!(
            "collision {:?}, Monte Carlo {exact:.4} vs {mc:.4}, idempotence {:?}, Dirac midpoint {:?}, Hilbert {:?}",
            collision.map(|_| "ok"),
            bary.map(|_| "ok"),
            diracs.map(|_| "ok"),
            hilbert.map(|_| "ok")
        ),
    );
}
