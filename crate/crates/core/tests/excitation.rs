mod common;

use common::*;
use dynident_core::baseparams::{compute_base, BaseParameterization};
use dynident_core::dynamics::regressor;
use dynident_core::excitation::*;
use dynident_core::kinematics::{psm_si, RobotModel};
use dynident_core::Error;
use proptest::prelude::*;

fn pendulum_setup() -> (RobotModel, BaseParameterization, JointLimits) {
    let model = pendulum();
    let limits = JointLimits::symmetric(&[1.2], &[1.5]);
    let base = compute_base(&model, &limits, 60, 1).unwrap();
    (model, base, limits)
}

fn pendulum_opts(seed: u64) -> OptimizeOptions {
    OptimizeOptions {
        f_f: 0.2,
        n_h: 2,
        n_s: Some(80),
        seed,
        starts: 4,
        ..Default::default()
    }
}

fn sample_traj(seed: u64) -> FourierTrajectory {
    random_feasible(&JointLimits::psm_default(), 0.18, 6, &mut rng(seed))
}

#[test]
fn state_derivatives_match_differences() {
    let traj = sample_traj(3);
    let h = 1e-3;
    for &t in &[0.0, 0.7, 2.3, 4.9] {
        let s = traj.state(t);
        let (p, m) = (traj.state(t + h), traj.state(t - h));
        let qd = (&p.q - &m.q) / (2.0 * h);
        let qdd = (&p.qd - &m.qd) / (2.0 * h);
        assert!((qd - &s.qd).norm() < 1e-5 * (1.0 + s.qd.norm()));
        assert!((qdd - &s.qdd).norm() < 1e-5 * (1.0 + s.qdd.norm()));
    }
}

#[test]
fn state_is_periodic() {
    let traj = sample_traj(4);
    let a = traj.state(1.3);
    let b = traj.state(1.3 + traj.period());
    assert!((a.q - b.q).norm() < 1e-10);
    assert!((a.qd - b.qd).norm() < 1e-10);
}

#[test]
fn stack_matches_direct_regressors() {
    let model = psm_si();
    let limits = JointLimits::psm_default();
    let base = compute_base(&model, &limits, 120, 2).unwrap();
    let traj = sample_traj(5);
    let n_s = 12;
    let w = stack_regressor(&model, &base, &traj, n_s).unwrap();
    assert_eq!(w.shape(), (n_s * 7, base.n_b));
    let dt = traj.period() / n_s as f64;
    for s in [0, 5, 11] {
        let y = base.reduce(&regressor(&model, &traj.state(s as f64 * dt)).unwrap());
        assert_eq!(w.rows(s * 7, 7), y);
    }
}

#[test]
fn too_few_samples_is_rejected() {
    let model = psm_si();
    let limits = JointLimits::psm_default();
    let base = compute_base(&model, &limits, 120, 2).unwrap();
    let r = stack_regressor(&model, &base, &sample_traj(1), 3);
    assert!(matches!(r, Err(Error::InsufficientSamples(_))));
}

#[test]
fn kappa_stable_under_sample_doubling() {
    let model = psm_si();
    let limits = JointLimits::psm_default();
    let base = compute_base(&model, &limits, 120, 2).unwrap();
    let traj = sample_traj(8);
    let k1 = trajectory_kappa(&model, &base, &traj, 400).unwrap();
    let k2 = trajectory_kappa(&model, &base, &traj, 800).unwrap();
    assert!((k1 - k2).abs() <= 0.05 * k2, "{k1} vs {k2}");
}

#[test]
fn pendulum_optimum_beats_random_search() {
    let (model, base, limits) = pendulum_setup();
    let opts = pendulum_opts(11);
    let report = optimize_trajectory(&model, &base, &limits, &opts).unwrap();
    let mut r = rng(99);
    let best_random = (0..300)
        .map(|_| {
            let t = random_feasible(&limits, opts.f_f, opts.n_h, &mut r);
            trajectory_kappa(&model, &base, &t, 80).unwrap()
        })
        .fold(f64::INFINITY, f64::min);
    let k = trajectory_kappa(&model, &base, &report.trajectory, 80).unwrap();
    assert!((k - report.kappa).abs() < 1e-6 * k);
    assert!(k <= best_random, "{k} vs {best_random}");
    assert!(report.verification_slack >= 0.0);
    assert!(limit_slack(&report.trajectory, &limits, 5000) >= 0.0);
}

#[test]
fn optimizer_is_reproducible_and_monotone() {
    let (model, base, limits) = pendulum_setup();
    let a = optimize_trajectory(&model, &base, &limits, &pendulum_opts(5)).unwrap();
    let b = optimize_trajectory(&model, &base, &limits, &pendulum_opts(5)).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.best_start, b.best_start);
    assert!(!a.history.is_empty());
    for w in a.history.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    assert!((a.history.last().unwrap() - a.log_kappa).abs() < 1e-12);
    let best = a.starts.iter().filter(|s| s.verified).map(|s| s.final_log_kappa).fold(f64::INFINITY, f64::min);
    assert_eq!(best, a.log_kappa);
}

#[test]
fn invalid_limits_are_rejected() {
    let (model, base, _) = pendulum_setup();
    let bad = JointLimits {
        q_min: vec![1.0],
        q_max: vec![-1.0],
        qd_min: vec![-1.0],
        qd_max: vec![1.0],
    };
    assert!(optimize_trajectory(&model, &base, &bad, &pendulum_opts(0)).is_err());
}

#[test]
fn trajectory_file_round_trip() {
    let traj = sample_traj(21);
    let back = FourierTrajectory::from_toml(&traj.to_toml()).unwrap();
    assert_eq!(back.n_h, traj.n_h);
    assert!((back.to_x() - traj.to_x()).norm() < 1e-12);
}

proptest! {
    #![proptest_config(pt_config(64))]

    #[test]
    fn random_feasible_respects_limits(seed in 0u64..1_000_000) {
        let limits = JointLimits::psm_default();
        let t = random_feasible(&limits, 0.18, 6, &mut rng(seed));
        prop_assert!(limit_slack(&t, &limits, 4000) >= 0.0);
    }

    #[test]
    fn x_layout_round_trips(seed in 0u64..1_000_000) {
        let t = sample_traj(seed);
        let back = FourierTrajectory::from_x(7, t.f_f, t.n_h, &t.to_x());
        prop_assert_eq!(back, t);
    }
}
