mod common;

use approx::assert_relative_eq;
use common::*;
use dynident_core::dynamics::{self, DynamicParameters, JointState, LinkInertialParams};
use dynident_core::excitation::JointLimits;
use dynident_core::ident::StaticsModel;
use dynident_core::kinematics::psm_si;
use dynident_core::runtime::*;
use dynident_core::sim::{random_poses, synthetic_parameters};
use dynident_core::Error;
use nalgebra::{DVector, Matrix3, Vector3};
use proptest::prelude::*;

fn short_drift() -> DriftOptions {
    DriftOptions {
        hold: 1.5,
        settle: 1.5,
        ..DriftOptions::psm_default()
    }
}

fn short_tracking(duration: f64) -> TrackingOptions {
    TrackingOptions {
        duration: Some(duration),
        settle: 1.0,
        ..TrackingOptions::psm_default()
    }
}

#[test]
fn gravity_is_rest_inverse_dynamics() {
    let model = psm_si();
    let mut r = rng(3);
    let limits = JointLimits::psm_default();
    for _ in 0..100 {
        let p = random_active(&model, &mut r);
        let q = random_state(&limits, &mut r).q;
        let g = gravity_torque(&model, &p, &q).unwrap();
        // qd = 0 leaves only the constant friction bias, which gravity mode keeps.
        let id = dynamics::inverse_dynamics(&model, &p, &JointState::at_rest(q.clone())).unwrap();
        assert!(rel_err(&g, &id) < 1e-10);
        let ct = computed_torque(&model, &p, &q, &DVector::zeros(7), &DVector::zeros(7)).unwrap();
        assert!((&g - ct).amax() <= 1e-12 * g.amax().max(1.0));
    }
}

#[test]
fn computed_torque_matches_inverse_dynamics() {
    let model = psm_si();
    let mut r = rng(4);
    let limits = JointLimits::psm_default();
    for _ in 0..50 {
        let p = random_active(&model, &mut r);
        let s = random_state(&limits, &mut r);
        let ct = computed_torque(&model, &p, &s.q, &s.qd, &s.qdd).unwrap();
        let id = dynamics::inverse_dynamics(&model, &p, &s).unwrap();
        assert!(rel_err(&ct, &id) < 1e-10);
    }
}

#[test]
fn zero_gravity_leaves_spring_and_bias() {
    let mut model = psm_si();
    model.gravity = Vector3::zeros();
    let p = synthetic_parameters(&model);
    let q = JointLimits::psm_default().center();
    let g = gravity_torque(&model, &p, &q).unwrap();
    let bias = dynamics::friction_torque(&model, &p, &DVector::zeros(model.n_links()));
    let expected = dynamics::spring_torque(&model, &p, &q) + model.maps.complete.transpose() * bias;
    assert!((g - expected).amax() < 1e-12);
}

#[test]
fn pendulum_gravity_at_horizontal() {
    let model = pendulum();
    let (m, r) = (0.7, 0.3);
    let mut p = DynamicParameters::zeros(&model);
    p.set_link(0, &LinkInertialParams::from_com(m, Vector3::new(r, 0.0, 0.0), Matrix3::identity() * 0.01));
    let g = gravity_torque(&model, &p, &DVector::zeros(1)).unwrap();
    assert_relative_eq!(g[0], m * 9.81 * r, epsilon = 1e-12);
}

#[test]
fn statics_gravity_covers_leading_joints() {
    let model = psm_si();
    let s = StaticsModel {
        links: vec!["1".into(), "2".into(), "3".into()],
        values: vec![[0.0, 0.0, 0.0, 0.0], [0.1, 0.0, 0.0, 0.2], [0.0, 0.0, 0.0, 0.5]],
    };
    let q = JointLimits::psm_default().center();
    let g = statics_gravity(&model, &s, &q).unwrap();
    assert_eq!(g.len(), 7);
    assert!(g.rows(3, 4).iter().all(|v| *v == 0.0));
    assert!((g.rows(0, 3) - s.predict(&model, &q).unwrap()).amax() == 0.0);
}

#[test]
fn reference_starts_at_insertion_offset() {
    let model = psm_si();
    let cfg = TestTrajectoryConfig::default();
    let (q, qd) = cfg.reference(&model, 0.0, 100.0);
    let qd_dvrk = model.motor_to_dvrk(&q);
    assert!(qd_dvrk[0].abs() < 1e-15 && qd_dvrk[1].abs() < 1e-15);
    assert_relative_eq!(qd_dvrk[2], 0.12, epsilon = 1e-15);
    // Phase advances 0.005 rad per step at 100 Hz.
    let v = model.motor_to_dvrk(&qd);
    assert_relative_eq!(v[0], 20f64.to_radians() * 0.5, epsilon = 1e-12);
    assert_relative_eq!(cfg.period(100.0), 2.0 * std::f64::consts::PI / 0.5, epsilon = 1e-12);
}

#[test]
fn reference_outside_limits_is_rejected() {
    let model = psm_si();
    let cfg = TestTrajectoryConfig {
        alpha_pos: 0.2,
        ..Default::default()
    };
    assert!(matches!(cfg.validate(&model, &JointLimits::psm_default()), Err(Error::Config(_))));
    TestTrajectoryConfig::default().validate(&model, &JointLimits::psm_default()).unwrap();
}

#[test]
fn configs_round_trip_and_validate() {
    let pid = PidConfig::psm_default();
    assert_eq!(PidConfig::from_toml(&pid.to_toml()).unwrap(), pid);
    let plant = PlantConfig::psm_default();
    assert_eq!(PlantConfig::from_toml(&plant.to_toml()).unwrap(), plant);
    assert_eq!(plant.static_friction[..3], [0.8, 0.8, 2.0]);
    let mut bad = pid.clone();
    bad.kd[2] = -1.0;
    assert!(bad.validate(7).is_err());
    assert!(pid.validate(6).is_err());
}

#[test]
fn stuck_plant_stays_put_within_band() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let q = JointLimits::psm_default().center();
    let g = gravity_torque(&model, &p, &q).unwrap();
    let mut cfg = PlantConfig::psm_default();
    cfg.static_friction = vec![0.8; 7];
    let mut plant = Plant::new(&model, &p, &cfg, q.clone()).unwrap();
    let mut tau = g.clone();
    tau[0] += 0.5;
    plant.advance(&tau, 0.5).unwrap();
    assert_eq!(plant.q, q);
    assert!(plant.stuck().iter().all(|s| *s));
    tau[0] += 0.5;
    plant.advance(&tau, 0.5).unwrap();
    assert!(plant.q[0] > q[0] + 1e-3);
}

#[test]
fn exact_compensation_never_drifts() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let limits = JointLimits::psm_default();
    let poses = random_poses(&limits, 3, &mut rng(11));
    let r = simulate_drift_test(&model, &p, GravityModel::Full(&p), &poses, &short_drift()).unwrap();
    assert_eq!(r.drift_poses, 0);
    assert_eq!(r.skipped_poses, 0);
    for pose in &r.poses {
        assert!(pose.within_bounds.iter().all(|b| *b));
        assert!(pose.excursion.iter().all(|e| *e == 0.0));
    }
}

#[test]
fn doubled_gravity_moment_drifts_joint_two() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let mut loaded = JointLimits::psm_default().center();
    loaded[1] = 0.5;
    // Doubling every first moment leaves the insertion force, which depends
    // on mass alone, untouched.
    let mut hat = p.clone();
    for (k, l) in model.links.iter().enumerate() {
        if l.flags.link_inertia {
            let mut v = p.link(k).to_array();
            for x in &mut v[6..9] {
                *x *= 2.0;
            }
            hat.set_link(k, &LinkInertialParams::from_slice(&v));
        }
    }
    let g_true = gravity_torque(&model, &p, &loaded).unwrap();
    let g_hat = gravity_torque(&model, &hat, &loaded).unwrap();
    let band = PlantConfig::psm_default().static_friction;
    assert!((g_hat[1] - g_true[1]).abs() > band[1], "{g_true} {g_hat}");
    assert!((g_hat[2] - g_true[2]).abs() < 1e-12);
    let r = simulate_drift_test(&model, &p, GravityModel::Full(&hat), &[loaded], &short_drift()).unwrap();
    assert!(r.poses[0].drift[1], "{}", r.to_text());
    assert!(!r.poses[0].within_bounds[1]);
}

#[test]
fn unreachable_pose_is_skipped() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let mut q = JointLimits::psm_default().center();
    q[2] = 0.5;
    let r = simulate_drift_test(&model, &p, GravityModel::Full(&p), &[q], &short_drift()).unwrap();
    assert_eq!(r.skipped_poses, 1);
    assert!(r.poses[0].skipped.as_deref().unwrap().contains("joint 3"));
    assert!(r.to_text().contains("skipped"));
}

#[test]
fn reports_are_reproducible() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let poses = random_poses(&JointLimits::psm_default(), 2, &mut rng(5));
    let opts = short_drift();
    let a = simulate_drift_test(&model, &p, GravityModel::Full(&p), &poses, &opts).unwrap();
    let b = simulate_drift_test(&model, &p, GravityModel::Full(&p), &poses, &opts).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.to_csv(), b.to_csv());
    let t = short_tracking(1.0);
    let a = simulate_tracking(&model, &p, Controller::PidComputedTorque(&p), &t).unwrap();
    let b = simulate_tracking(&model, &p, Controller::PidComputedTorque(&p), &t).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
}

#[test]
fn zero_amplitude_tracks_static_regulation_error() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let mut opts = short_tracking(2.0);
    opts.settle = 3.0;
    opts.trajectory.alpha_ori = 0.0;
    opts.trajectory.alpha_pos = 0.0;
    let r = simulate_tracking(&model, &p, Controller::Pid, &opts).unwrap();
    // Plain regulation at the constant target, stepped by hand.
    let (q0, _) = opts.trajectory.reference(&model, 0.0, opts.pid.rate);
    let zero = DVector::zeros(7);
    let mut plant = Plant::new(&model, &p, &opts.plant, q0.clone()).unwrap();
    let dt = 1.0 / opts.pid.rate;
    let settle = (opts.settle * opts.pid.rate).round() as usize;
    let mut err = vec![vec![]; 7];
    for k in 0..settle + r.samples {
        if k >= settle {
            for j in 0..7 {
                err[j].push(plant.q[j] - q0[j]);
            }
        }
        let tau = opts.pid.feedback(&q0, &zero, &plant.q, &plant.qd);
        plant.advance(&tau, dt).unwrap();
    }
    for j in 0..7 {
        let s = ErrorStats::from_series(&err[j]);
        assert!((s.mean - r.position[j].mean).abs() < 1e-12 && (s.max - r.position[j].max).abs() < 1e-12);
    }
    // The stiction-held joints sit still at their sag under gravity.
    for s in &r.position[..3] {
        assert!(s.std < 1e-12);
    }
    assert!(r.position[2].mean.abs() > 1e-3);
}

#[test]
fn computed_torque_beats_pid_only() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let opts = short_tracking(4.0);
    let rs = compare_controllers(&model, &p, &[Controller::Pid, Controller::PidComputedTorque(&p)], &opts).unwrap();
    assert_eq!(rs[0].controller, "pid");
    assert!(rs[1].position[0].rmse < rs[0].position[0].rmse);
    for j in 0..3 {
        assert!(rs[1].torque[j].rmse < rs[0].torque[j].rmse);
    }
    assert_eq!(rs[0].trace.len(), 400);
}

#[test]
fn aggressive_gains_abort_as_unstable() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let mut opts = short_tracking(2.0);
    opts.pid.kp[0] = 1e5;
    let err = simulate_tracking(&model, &p, Controller::Pid, &opts).unwrap_err();
    assert!(matches!(err, Error::Unstable(_)), "{err}");
}

#[test]
fn benchmark_needs_enough_states() {
    let model = psm_si();
    let p = synthetic_parameters(&model);
    let limits = JointLimits::psm_default();
    assert!(matches!(benchmark_runtime(&model, &p, &limits, 99, 0), Err(Error::Precondition(_))));
    let b = benchmark_runtime(&model, &p, &limits, 100, 0).unwrap();
    assert_eq!(b.n, 100);
    assert!(b.mean_ms > 0.0 && b.std_ms >= 0.0);
}

#[test]
fn error_stats_of_known_series() {
    let s = ErrorStats::from_series(&[1.0, -1.0, 3.0, -3.0]);
    assert_eq!(s.mean, 0.0);
    assert_relative_eq!(s.std, 5f64.sqrt(), epsilon = 1e-15);
    assert_relative_eq!(s.rmse, 5f64.sqrt(), epsilon = 1e-15);
    assert_eq!(s.max, 3.0);
}

proptest! {
    #![proptest_config(pt_config(4))]
    #[test]
    fn wider_deadband_never_adds_drift(seed in 0u64..1000, scale in 0.5f64..1.5, widen in 1.0f64..3.0) {
        let model = psm_si();
        let p = synthetic_parameters(&model);
        let hat = DynamicParameters::from_vector(&model, &p.values * scale).unwrap();
        let poses = random_poses(&JointLimits::psm_default(), 1, &mut rng(seed));
        let narrow = short_drift();
        let mut wide = narrow.clone();
        for b in &mut wide.plant.static_friction {
            *b *= widen;
        }
        let a = simulate_drift_test(&model, &p, GravityModel::Full(&hat), &poses, &narrow).unwrap();
        let b = simulate_drift_test(&model, &p, GravityModel::Full(&hat), &poses, &wide).unwrap();
        for j in 0..3 {
            prop_assert!(a.poses[0].drift[j] || !b.poses[0].drift[j], "joint {}: {}\n{}", j + 1, a.to_text(), b.to_text());
        }
    }
}
