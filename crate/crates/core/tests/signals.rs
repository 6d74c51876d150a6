mod common;

use std::f64::consts::PI;

use common::*;
use dynident_core::baseparams::compute_base;
use dynident_core::excitation::{random_feasible, JointLimits};
use dynident_core::kinematics::psm_si;
use dynident_core::signals::*;
use dynident_core::sim::{excite, synthetic_parameters, ExciteOptions};
use dynident_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

const RATE: f64 = 200.0;

fn csv_with_rows(rows: &[&str]) -> String {
    let mut s = log_header(7).join(",");
    for r in rows {
        s.push('\n');
        s.push_str(r);
    }
    s
}

fn row(t: f64, tau1: &str) -> String {
    let mut v = vec![t.to_string()];
    v.extend((0..14).map(|i| format!("{}", i as f64 * 0.1)));
    v.push(tau1.to_string());
    v.extend((0..6).map(|i| format!("{}", i as f64 * 0.2)));
    v.join(",")
}

fn opts_rate(rate: f64) -> ExciteOptions {
    ExciteOptions {
        rate,
        ..Default::default()
    }
}

fn sine(f: f64, phase: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * f * i as f64 / RATE + phase).sin()).collect()
}

/// Least-squares amplitude and phase of a sinusoid at `f` over `range`.
fn fit_sine(x: &[f64], f: f64, range: std::ops::Range<usize>) -> (f64, f64) {
    let (mut ss, mut sc, mut cc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in range {
        let w = 2.0 * PI * f * i as f64 / RATE;
        let (s, c) = w.sin_cos();
        ss += s * s;
        sc += s * c;
        cc += c * c;
        xs += x[i] * s;
        xc += x[i] * c;
    }
    let det = ss * cc - sc * sc;
    let a = (xs * cc - xc * sc) / det;
    let b = (xc * ss - xs * sc) / det;
    ((a * a + b * b).sqrt(), b.atan2(a))
}

/// Lag maximizing the normalized cross-correlation over an interior window.
fn xcorr_peak_lag(x: &[f64], y: &[f64], max_lag: i64, margin: usize) -> i64 {
    let n = x.len();
    let c = |l: i64| -> f64 {
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for i in margin..n - margin {
            let yv = y[(i as i64 + l) as usize];
            xy += x[i] * yv;
            xx += x[i] * x[i];
            yy += yv * yv;
        }
        xy / (xx * yy).sqrt()
    };
    (-max_lag..=max_lag).max_by(|&a, &b| c(a).total_cmp(&c(b))).unwrap()
}

/// Squared magnitude of the prewarped digital Butterworth response.
fn squared_response(f: f64, fc: f64, order: i32) -> f64 {
    let r = (PI * f / RATE).tan() / (PI * fc / RATE).tan();
    1.0 / (1.0 + r.powi(2 * order))
}

#[test]
fn reads_well_formed_log() {
    let text = csv_with_rows(&[&row(0.0, "1.0"), &row(0.005, "1.5"), &row(0.01, "-2.0")]);
    let log = TrajectoryLog::from_csv(&text, "mem.csv").unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(log.dof(), 7);
    assert_eq!(log.tau[(2, 0)], -2.0);
    assert_eq!(log.q[(1, 1)], 0.1);
    assert!((log.rate() - 200.0).abs() < 1e-9);
}

#[test]
fn nan_row_names_its_line() {
    let text = csv_with_rows(&[&row(0.0, "1.0"), &row(0.005, "nan"), &row(0.01, "1.0")]);
    match TrajectoryLog::from_csv(&text, "mem.csv") {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("tau1"), "{msg}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn decreasing_time_is_an_ordering_error() {
    let text = csv_with_rows(&[&row(0.0, "1.0"), &row(0.01, "1.0"), &row(0.005, "1.0")]);
    assert!(matches!(
        TrajectoryLog::from_csv(&text, "mem.csv"),
        Err(Error::Ordering { line: 4, .. })
    ));
}

#[test]
fn malformed_header_and_jitter_are_rejected() {
    let bad = "t,q1,qd1,tau2\n0,0,0,0";
    assert!(matches!(TrajectoryLog::from_csv(bad, "x"), Err(Error::Parse { line: 1, .. })));
    let text = csv_with_rows(&[&row(0.0, "1"), &row(0.005, "1"), &row(0.0102, "1"), &row(0.015, "1")]);
    assert!(matches!(TrajectoryLog::from_csv(&text, "x"), Err(Error::Parse { .. })));
}

#[test]
fn log_file_round_trip() {
    let n = 50;
    let t: Vec<f64> = (0..n).map(|i| i as f64 / RATE).collect();
    let m = |k: f64| DMatrix::from_fn(n, 7, |i, j| (i as f64 * 0.37 + j as f64 * k).sin() * 1e-3 + 1.0 / 3.0);
    let log = TrajectoryLog::new(t, m(1.0), m(2.0), m(3.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    log.write(&path).unwrap();
    assert_eq!(read_log(&path).unwrap(), log);
}

#[test]
fn constant_series_is_unchanged() {
    let x = vec![-3.25; 2000];
    let y = zero_phase_filter(&x, &FilterSpec::default(), RATE).unwrap();
    assert!(y.iter().all(|v| (v + 3.25).abs() < 1e-10));
}

#[test]
fn short_series_is_a_padding_error() {
    let x = vec![1.0; 100];
    assert!(matches!(
        zero_phase_filter(&x, &FilterSpec::default(), RATE),
        Err(Error::Padding { .. })
    ));
}

#[test]
fn passband_sine_has_squared_gain_and_no_lag() {
    let n = 4000;
    let x = sine(0.5, 0.4, n);
    let y = zero_phase_filter(&x, &FilterSpec::default(), RATE).unwrap();
    let bw = Butterworth::design(&FilterSpec::default(), RATE).unwrap();
    let l = bw.settling_length();
    let (amp, phase) = fit_sine(&y, 0.5, l..n - l);
    let expected = squared_response(0.5, 5.4, 6);
    assert!((amp - 1.0).abs() < 0.01);
    assert!((amp - expected).abs() < 1e-6, "{amp} vs {expected}");
    assert!((bw.magnitude(0.5).powi(2) - expected).abs() < 1e-12);
    let (_, phase_in) = fit_sine(&x, 0.5, l..n - l);
    assert!((phase - phase_in).abs() < 1e-6);
    assert_eq!(xcorr_peak_lag(&x, &y, 20, 200), 0);
}

#[test]
fn stopband_sine_is_removed() {
    let n = 4000;
    let x = sine(50.0, 0.3, n);
    let y = zero_phase_filter(&x, &FilterSpec::default(), RATE).unwrap();
    let l = Butterworth::design(&FilterSpec::default(), RATE).unwrap().settling_length();
    let residual = y[l..n - l].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(squared_response(50.0, 5.4, 6) < 1e-12);
    assert!(residual < 1e-6, "{residual:e}");
}

#[test]
fn derivative_examples() {
    assert!(differentiate(&[4.0; 10], 100.0).iter().all(|v| *v == 0.0));
    let lin: Vec<f64> = (0..50).map(|i| i as f64 / 100.0).collect();
    assert!(differentiate(&lin, 100.0).iter().all(|v| (v - 1.0).abs() < 1e-10));
    let quad: Vec<f64> = (0..2000).map(|i| (i as f64 / 1000.0).powi(2)).collect();
    let d = differentiate(&quad, 1000.0);
    for i in 1..quad.len() - 1 {
        assert!((d[i] - 2.0 * i as f64 / 1000.0).abs() < 1e-6);
    }
}

#[test]
fn differentiate_integral_is_second_order() {
    let err = |rate: f64| {
        let n = (4.0 * rate) as usize;
        let f = |t: f64| (2.0 * PI * 0.7 * t).cos() + 0.3 * (2.0 * PI * 1.9 * t).sin();
        let x: Vec<f64> = (0..n).map(|i| f(i as f64 / rate)).collect();
        let mut integral = vec![0.0; n];
        for i in 1..n {
            integral[i] = integral[i - 1] + 0.5 * (x[i] + x[i - 1]) / rate;
        }
        let d = differentiate(&integral, rate);
        d.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (err(100.0), err(200.0));
    assert!(e1 < 0.05);
    assert!(e1 / e2 > 3.5, "{e1:e} / {e2:e}");
}

#[test]
fn noiseless_simulated_log_reproduces_efforts() {
    let model = psm_si();
    let limits = JointLimits::psm_default();
    let base = compute_base(&model, &limits, 150, 3).unwrap();
    let theta = synthetic_parameters(&model);
    let traj = random_feasible(&limits, 0.18, 2, &mut rng(17));
    let opts = opts_rate(1000.0);
    let raw = ProblemOptions {
        filter: None,
        filter_positions: false,
    };
    // Reflection padding leaves a transient that decays within one settling
    // length of each end; the oracle is scored on the interior.
    let settle = Butterworth::design(&FilterSpec::default(), 1000.0).unwrap().settling_length();
    let residual = |theta: &dynident_core::dynamics::DynamicParameters, opts: &ProblemOptions, trim: usize| {
        let log = excite(&model, theta, &traj, &opts_rate(1000.0)).unwrap();
        let p = build_problem(&model, &base, &log, opts).unwrap();
        assert_eq!(p.w.nrows(), log.len() * 7);
        let p = p.select_samples(trim..p.n_samples() - trim);
        (&p.w * p.to_active(&theta.values) - &p.b).norm() / p.b.norm()
    };
    let rel = residual(&theta, &raw, 0);
    assert!(rel < 1e-6, "unfiltered {rel:e}");
    // Coulomb switching puts effort content above the cut-off, so the
    // filtered oracle uses smooth friction only.
    let mut smooth = theta.clone();
    for k in 0..model.n_links() {
        let mut a = smooth.additional(k);
        a.fc = 0.0;
        smooth.set_additional(k, &a);
    }
    let rel = residual(&smooth, &ProblemOptions::default(), settle);
    assert!(rel < 1e-6, "filtered {rel:e}");
    let log = excite(&model, &theta, &traj, &opts).unwrap();
    let p = build_problem(&model, &base, &log, &ProblemOptions::default()).unwrap();
    let again = build_problem(&model, &base, &log, &ProblemOptions::default()).unwrap();
    assert_eq!(again.w, p.w);
    assert_eq!(again.b, p.b);
    assert_eq!(again.omega, p.omega);
}

#[test]
fn weights_follow_effort_range() {
    let model = pendulum();
    let limits = JointLimits::symmetric(&[2.0], &[1.0]);
    let base = compute_base(&model, &limits, 30, 1).unwrap();
    let n = 41;
    let t: Vec<f64> = (0..n).map(|i| i as f64 / RATE).collect();
    let q = DMatrix::from_fn(n, 1, |i, _| i as f64 * 0.01);
    let qd = DMatrix::from_element(n, 1, 2.0);
    let tau = DMatrix::from_fn(n, 1, |i, _| -2.0 + 0.1 * i as f64);
    let log = TrajectoryLog::new(t.clone(), q.clone(), qd.clone(), tau).unwrap();
    let raw = ProblemOptions {
        filter: None,
        filter_positions: false,
    };
    let p = build_problem(&model, &base, &log, &raw).unwrap();
    assert!((p.omega[0] - 0.25).abs() < 1e-12);
    assert!(p.warnings.is_empty());

    let flat = TrajectoryLog::new(t, q, qd, DMatrix::from_element(n, 1, 1.5)).unwrap();
    let p = build_problem(&model, &base, &flat, &raw).unwrap();
    assert_eq!(p.omega[0], 1.0);
    assert_eq!(p.warnings.len(), 1);
}

#[test]
fn empty_log_is_rejected() {
    let model = pendulum();
    let base = compute_base(&model, &JointLimits::symmetric(&[2.0], &[1.0]), 30, 1).unwrap();
    let z = DMatrix::zeros(0, 1);
    let log = TrajectoryLog::new(vec![], z.clone(), z.clone(), z).unwrap();
    assert!(matches!(
        build_problem(&model, &base, &log, &ProblemOptions::default()),
        Err(Error::Precondition(_))
    ));
}

proptest! {
    #![proptest_config(pt_config(32))]

    #[test]
    fn filter_commutes_with_scaling(seed in 0u64..100_000, c in -50.0f64..50.0) {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..1500).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let spec = FilterSpec::default();
        let y = zero_phase_filter(&x, &spec, RATE).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let ys = zero_phase_filter(&xs, &spec, RATE).unwrap();
        for (a, b) in ys.iter().zip(&y) {
            prop_assert!((a - c * b).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn repeated_filtering_never_lags(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let comps: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| (
                rand::Rng::random_range(&mut r, 0.1..2.0),
                rand::Rng::random_range(&mut r, 0.0..6.0),
                rand::Rng::random_range(&mut r, 0.2..1.0),
            ))
            .collect();
        let n = 3000;
        let x: Vec<f64> = (0..n)
            .map(|i| comps.iter().map(|(f, p, a)| a * (2.0 * PI * f * i as f64 / RATE + p).sin()).sum())
            .collect();
        let spec = FilterSpec::default();
        let once = zero_phase_filter(&x, &spec, RATE).unwrap();
        let twice = zero_phase_filter(&once, &spec, RATE).unwrap();
        prop_assert_eq!(xcorr_peak_lag(&x, &once, 15, 30), 0);
        prop_assert_eq!(xcorr_peak_lag(&x, &twice, 15, 30), 0);
    }
}
