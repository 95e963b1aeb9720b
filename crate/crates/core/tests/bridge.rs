mod support;

use density_steer::bridge::{
    build_log_kernel, fixed_point, map_back_trajectories, optimal_control, simulate_controlled,
    write_ensemble_csv, BridgeFactors, BridgeProblem,
};
use density_steer::flatness::Wheelbase;
use density_steer::gramian::{gramian_numeric_oracle, state_transition, RelativeDegree};
use density_steer::measure::DiscreteMeasure;
use nalgebra::{DMatrix, DVector};

fn solve(p: &BridgeProblem, tol: f64) -> BridgeFactors {
    let k = build_log_kernel(p).unwrap();
    let f = fixed_point(p, &k, tol, 10_000).unwrap();
    assert!(f.converged);
    f
}

fn two_lane_problem() -> BridgeProblem {
    let l0 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.2, 0.3, 0.1]));
    let a = DiscreteMeasure::uniform(support::gaussian_samples(
        &[0.0, 20.0, 0.0, 0.0],
        &l0,
        30,
        1,
    ))
    .unwrap();
    let b = DiscreteMeasure::uniform(support::gaussian_samples(
        &[41.0, 21.0, -3.7, 0.0],
        &l0,
        25,
        2,
    ))
    .unwrap();
    BridgeProblem::new(a, b, 0.1, 2.0, RelativeDegree::bicycle()).unwrap()
}

#[test]
fn pinned_ensemble_follows_the_gaussian_bridge() {
    // one atom at each end: the steered process is the prior conditioned on both endpoints
    let deg = RelativeDegree::new(vec![2]).unwrap();
    let (z0, y) = (vec![0.0, 1.0], vec![3.0, -1.0]);
    let (eps, t_end) = (0.2, 2.0);
    let p = BridgeProblem::new(
        DiscreteMeasure::dirac(z0.clone()).unwrap(),
        DiscreteMeasure::dirac(y.clone()).unwrap(),
        eps,
        t_end,
        deg.clone(),
    )
    .unwrap();
    let f = solve(&p, 1e-10);
    let n_sim = 4000;
    let ens = simulate_controlled(&p, &f, n_sim, 0.01, 5).unwrap();

    let t = 0.8;
    let k = (t / 0.01_f64).round() as usize;
    let m = |d: f64| gramian_numeric_oracle(&deg, d, 4000);
    let (mt, mtot) = (m(t), m(t_end));
    let rest = state_transition(&deg, t_end - t);
    let gain = &mt * rest.transpose() * mtot.clone().try_inverse().unwrap();
    let z0v = DVector::from_vec(z0);
    let mean = &state_transition(&deg, t) * &z0v
        + &gain * (DVector::from_vec(y.clone()) - &state_transition(&deg, t_end) * &z0v);
    let cov = (&mt - &gain * &rest * &mt) * (2.0 * eps);

    let (em, ec) = support::moments(&ens.states[k], &vec![1.0 / n_sim as f64; n_sim]);
    for i in 0..2 {
        let se = (cov[(i, i)] / n_sim as f64).sqrt();
        assert!(
            (em[i] - mean[i]).abs() < 4.0 * se,
            "mean {i}: {} vs {}",
            em[i],
            mean[i]
        );
        assert!(
            (ec[(i, i)] / cov[(i, i)] - 1.0).abs() < 0.1,
            "var {i}: {} vs {}",
            ec[(i, i)],
            cov[(i, i)]
        );
    }
    for z in ens.terminal() {
        assert!((z[0] - y[0]).abs() < 1e-9 && (z[1] - y[1]).abs() < 1e-9);
    }
}

#[test]
fn terminal_states_are_target_atoms_with_the_coupled_masses() {
    let p = two_lane_problem();
    let f = solve(&p, 1e-8);
    let n_sim = 2000;
    let ens = simulate_controlled(&p, &f, n_sim, 0.02, 9).unwrap();
    let mut counts = vec![0usize; p.sigma_t.len()];
    for z in ens.terminal() {
        let j = (0..p.sigma_t.len())
            .find(|&j| {
                p.sigma_t
                    .point(j)
                    .iter()
                    .zip(z)
                    .all(|(a, b)| (a - b).abs() < 1e-8 * a.abs().max(1.0))
            })
            .expect("terminal state is an atom");
        counts[j] += 1;
    }
    // each atom count is binomial; allow 4.5 standard deviations
    for (c, q) in counts.iter().zip(p.sigma_t.masses()) {
        let expect = q * n_sim as f64;
        let sd = (n_sim as f64 * q * (1.0 - q)).sqrt();
        assert!((*c as f64 - expect).abs() < 4.5 * sd, "{c} vs {expect}");
    }
}

#[test]
fn recorded_controls_are_the_optimal_feedback() {
    let p = two_lane_problem();
    let f = solve(&p, 1e-6);
    let ens = simulate_controlled(&p, &f, 8, 0.05, 1).unwrap();
    for k in [0, 10, 39] {
        for s in 0..8 {
            let u = optimal_control(&f, &p, &ens.states[k][s], ens.times[k]).unwrap();
            assert_eq!(u, ens.controls[k][s]);
        }
    }
    assert_eq!(ens.controls.len(), ens.times.len() - 1);
}

#[test]
fn simulation_does_not_depend_on_the_thread_count() {
    let p = two_lane_problem();
    let f = solve(&p, 1e-6);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_controlled(&p, &f, 64, 0.05, 21).unwrap())
    };
    assert_eq!(run(1), run(3));
    assert_ne!(run(1), simulate_controlled(&p, &f, 64, 0.05, 22).unwrap());
}

#[test]
fn bad_grids_are_rejected() {
    let p = two_lane_problem();
    let f = solve(&p, 1e-4);
    assert!(simulate_controlled(&p, &f, 0, 0.05, 1).is_err());
    assert!(simulate_controlled(&p, &f, 4, 0.3, 1).is_err());
    assert!(simulate_controlled(&p, &f, 4, -0.1, 1).is_err());
    assert!(optimal_control(&f, &p, &[0.0, 20.0, 0.0, 0.0], 2.0).is_err());
}

#[test]
fn tighter_tolerance_shrinks_the_terminal_residual() {
    let p = two_lane_problem();
    let k = build_log_kernel(&p).unwrap();
    let loose = fixed_point(&p, &k, 1e-3, 1000)
        .unwrap()
        .boundary_residuals(&p, &k);
    let tight = fixed_point(&p, &k, 1e-12, 10_000)
        .unwrap()
        .boundary_residuals(&p, &k);
    assert!(tight.1 < loose.1);
    assert!(tight.0 < 1e-10 && tight.1 < 1e-10, "{tight:?}");
}

#[test]
fn fixed_point_reports_an_exhausted_budget() {
    let p = two_lane_problem();
    let k = build_log_kernel(&p).unwrap();
    let f = fixed_point(&p, &k, 1e-14, 2).unwrap();
    assert!(!f.converged);
    assert_eq!(f.iterations, 2);
}

#[test]
fn ensemble_csv_layout() {
    let p = two_lane_problem();
    let f = solve(&p, 1e-6);
    let ens = simulate_controlled(&p, &f, 3, 0.1, 4).unwrap();
    let phys = map_back_trajectories(&ens, Wheelbase::default()).unwrap();
    let mut buf = Vec::new();
    write_ensemble_csv(&mut buf, &ens, &phys).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["t", "sim_id", "z1", "z2", "z3", "z4", "u1", "u2", "x", "y", "theta", "v", "a", "phi"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 21 * 3);
    let last = rows.last().unwrap();
    assert!(last[6].is_empty() && last[12].is_empty());
    let first = &rows[0];
    let (z2, v): (f64, f64) = (first[3].parse().unwrap(), first[11].parse().unwrap());
    assert!(v >= z2.abs() - 1e-9);
}
