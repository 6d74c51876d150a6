//! Periodic Fourier excitation trajectories and their optimization for a
//! well-conditioned stacked base regressor.
//!
//! Each motor follows
//! `q_j(t) = q_oj + sum_k [a_jk sin(k w t) + b_jk cos(k w t)] / (k w)`,
//! so velocities and accelerations are available in closed form. The
//! optimizer minimizes `log kappa` of the RMS-column-scaled base regressor
//! with a log barrier on the (linear) position/velocity limits and BFGS
//! steps that never leave the shrunk feasible set.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseparams::BaseParameterization;
use crate::dynamics::{self, JointState};
use crate::error::{Error, Result};
use crate::kinematics::RobotModel;

pub const PSM_LIMITS: &str = include_str!("../data/psm_limits.toml");
pub const DEFAULT_FUNDAMENTAL_HZ: f64 = 0.18;
pub const DEFAULT_HARMONICS: usize = 6;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub qd_min: Vec<f64>,
    pub qd_max: Vec<f64>,
}

impl JointLimits {
    pub fn symmetric(q: &[f64], qd: &[f64]) -> Self {
        JointLimits {
            q_min: q.iter().map(|v| -v).collect(),
            q_max: q.to_vec(),
            qd_min: qd.iter().map(|v| -v).collect(),
            qd_max: qd.to_vec(),
        }
    }

    pub fn psm_default() -> Self {
        Self::from_toml(PSM_LIMITS).expect("bundled limits are valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let l: JointLimits = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        l.validate()?;
        Ok(l)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("limits serialize")
    }

    pub fn dof(&self) -> usize {
        self.q_min.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q_min.len();
        if [self.q_max.len(), self.qd_min.len(), self.qd_max.len()] != [n, n, n] {
            return Err(Error::Config("limit vectors differ in length".into()));
        }
        for j in 0..n {
            if !(self.q_min[j] < self.q_max[j]) {
                return Err(Error::Config(format!("joint {}: q_min must be < q_max", j + 1)));
            }
            if !(self.qd_min[j] < 0.0 && self.qd_max[j] > 0.0) {
                return Err(Error::Config(format!(
                    "joint {}: velocity limits must bracket zero",
                    j + 1
                )));
            }
        }
        Ok(())
    }

    pub fn check_dof(&self, dof: usize) -> Result<()> {
        if self.dof() != dof {
            return Err(Error::Dimension {
                context: "joint limits",
                expected: dof,
                got: self.dof(),
            });
        }
        Ok(())
    }

    /// Limits pulled inward by `frac` of each half-range (positions) or bound
    /// (velocities).
    pub fn shrink(&self, frac: f64) -> Self {
        let k = 1.0 - frac;
        let n = self.dof();
        let mut out = self.clone();
        for j in 0..n {
            let c = 0.5 * (self.q_min[j] + self.q_max[j]);
            let h = 0.5 * (self.q_max[j] - self.q_min[j]);
            out.q_min[j] = c - k * h;
            out.q_max[j] = c + k * h;
            out.qd_min[j] = k * self.qd_min[j];
            out.qd_max[j] = k * self.qd_max[j];
        }
        out
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), (0..self.dof()).map(|j| 0.5 * (self.q_min[j] + self.q_max[j])))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierTrajectory {
    pub f_f: f64,
    pub n_h: usize,
    pub q0: Vec<f64>,
    /// `a[j][k-1]`, sine amplitudes (velocity units).
    pub a: Vec<Vec<f64>>,
    /// `b[j][k-1]`, cosine amplitudes (velocity units).
    pub b: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MotorRow {
    q0: f64,
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrajFile {
    f_f: f64,
    n_h: usize,
    motor: Vec<MotorRow>,
}

/// Per-time basis rows shared by every motor: coefficients of
/// `[q0, a_1..a_n, b_1..b_n]` in position, velocity and acceleration.
#[derive(Debug, Clone)]
struct Basis {
    pos: Vec<f64>,
    vel: Vec<f64>,
    acc: Vec<f64>,
}

fn basis(n_h: usize, w: f64, t: f64) -> Basis {
    let m = 1 + 2 * n_h;
    let mut pos = vec![0.0; m];
    let mut vel = vec![0.0; m];
    let mut acc = vec![0.0; m];
    pos[0] = 1.0;
    for k in 1..=n_h {
        let kw = k as f64 * w;
        let (s, c) = (kw * t).sin_cos();
        pos[k] = s / kw;
        pos[n_h + k] = c / kw;
        vel[k] = c;
        vel[n_h + k] = -s;
        acc[k] = -kw * s;
        acc[n_h + k] = -kw * c;
    }
    Basis { pos, vel, acc }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl FourierTrajectory {
    pub fn zeros(dof: usize, f_f: f64, n_h: usize) -> Self {
        FourierTrajectory {
            f_f,
            n_h,
            q0: vec![0.0; dof],
            a: vec![vec![0.0; n_h]; dof],
            b: vec![vec![0.0; n_h]; dof],
        }
    }

    pub fn dof(&self) -> usize {
        self.q0.len()
    }

    pub fn period(&self) -> f64 {
        1.0 / self.f_f
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.f_f
    }

    fn block(&self) -> usize {
        1 + 2 * self.n_h
    }

    /// Coefficients flattened per motor as `[q0, a.., b..]`.
    pub fn to_x(&self) -> DVector<f64> {
        let m = self.block();
        let mut x = DVector::zeros(self.dof() * m);
        for j in 0..self.dof() {
            x[j * m] = self.q0[j];
            for k in 0..self.n_h {
                x[j * m + 1 + k] = self.a[j][k];
                x[j * m + 1 + self.n_h + k] = self.b[j][k];
            }
        }
        x
    }

    pub fn from_x(dof: usize, f_f: f64, n_h: usize, x: &DVector<f64>) -> Self {
        let m = 1 + 2 * n_h;
        let mut t = Self::zeros(dof, f_f, n_h);
        for j in 0..dof {
            t.q0[j] = x[j * m];
            for k in 0..n_h {
                t.a[j][k] = x[j * m + 1 + k];
                t.b[j][k] = x[j * m + 1 + n_h + k];
            }
        }
        t
    }

    fn coeffs(&self, j: usize) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.block());
        c.push(self.q0[j]);
        c.extend_from_slice(&self.a[j]);
        c.extend_from_slice(&self.b[j]);
        c
    }

    pub fn state(&self, t: f64) -> JointState {
        let bs = basis(self.n_h, self.omega(), t);
        let n = self.dof();
        let mut q = DVector::zeros(n);
        let mut qd = DVector::zeros(n);
        let mut qdd = DVector::zeros(n);
        for j in 0..n {
            let c = self.coeffs(j);
            q[j] = dot(&bs.pos, &c);
            qd[j] = dot(&bs.vel, &c);
            qdd[j] = dot(&bs.acc, &c);
        }
        JointState::new(q, qd, qdd)
    }

    pub fn to_toml(&self) -> String {
        let f = TrajFile {
            f_f: self.f_f,
            n_h: self.n_h,
            motor: (0..self.dof())
                .map(|j| MotorRow {
                    q0: self.q0[j],
                    a: self.a[j].clone(),
                    b: self.b[j].clone(),
                })
                .collect(),
        };
        toml::to_string(&f).expect("trajectory serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: TrajFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !(f.f_f > 0.0) {
            return Err(Error::Config("f_f must be positive".into()));
        }
        if f.motor.iter().any(|m| m.a.len() != f.n_h || m.b.len() != f.n_h) {
            return Err(Error::Config("each motor needs n_h sine and cosine amplitudes".into()));
        }
        Ok(FourierTrajectory {
            f_f: f.f_f,
            n_h: f.n_h,
            q0: f.motor.iter().map(|m| m.q0).collect(),
            a: f.motor.iter().map(|m| m.a.clone()).collect(),
            b: f.motor.iter().map(|m| m.b.clone()).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

pub fn sample_trajectory(traj: &FourierTrajectory, times: &[f64]) -> Vec<JointState> {
    times.iter().map(|&t| traj.state(t)).collect()
}

/// `n_s` uniformly spaced times over one period, starting at 0.
pub fn uniform_times(traj: &FourierTrajectory, n_s: usize) -> Vec<f64> {
    let dt = traj.period() / n_s as f64;
    (0..n_s).map(|i| i as f64 * dt).collect()
}

/// Samples per period at the logging rate.
pub fn default_sample_count(f_f: f64) -> usize {
    (DEFAULT_SAMPLE_RATE_HZ / f_f).round() as usize
}

pub fn stack_regressor(
    model: &RobotModel,
    base: &BaseParameterization,
    traj: &FourierTrajectory,
    n_s: usize,
) -> Result<DMatrix<f64>> {
    let dof = model.dof();
    if n_s == 0 || n_s * dof < base.n_b {
        return Err(Error::InsufficientSamples(format!(
            "{n_s} samples give {} rows for {} base parameters",
            n_s * dof,
            base.n_b
        )));
    }
    let cols = base.base_indices();
    let mut w = DMatrix::zeros(n_s * dof, base.n_b);
    for (s, t) in uniform_times(traj, n_s).into_iter().enumerate() {
        let y = dynamics::regressor(model, &traj.state(t))?;
        for (c, &i) in cols.iter().enumerate() {
            for r in 0..dof {
                w[(s * dof + r, c)] = y[(r, i)];
            }
        }
    }
    Ok(w)
}

fn column_rms(w: &DMatrix<f64>) -> Vec<f64> {
    let n = w.nrows() as f64;
    (0..w.ncols()).map(|c| (w.column(c).norm_squared() / n).sqrt()).collect()
}

/// `sigma_max / sigma_min`, optionally after dividing each column by its RMS.
/// Rank-deficient input returns `f64::INFINITY`.
pub fn condition_number(w: &DMatrix<f64>, rms_scaled: bool) -> Result<f64> {
    let mut m = w.clone();
    if rms_scaled {
        for (c, s) in column_rms(w).into_iter().enumerate() {
            if s == 0.0 {
                return Err(Error::Scaling(format!("column {c} has zero RMS")));
            }
            m.column_mut(c).scale_mut(1.0 / s);
        }
    }
    let sv = m.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min <= max * f64::EPSILON * (w.nrows().max(w.ncols()) as f64) || min == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// `log kappa` of the RMS-scaled matrix and its gradient with respect to the
/// unscaled entries. `None` when a column vanishes or the Gram is singular.
fn log_kappa_with_grad(w: &DMatrix<f64>, want_grad: bool) -> Option<(f64, Option<DMatrix<f64>>)> {
    let n = w.nrows() as f64;
    let s = column_rms(w);
    if s.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let mut v = w.clone();
    for (c, sc) in s.iter().enumerate() {
        v.column_mut(c).scale_mut(1.0 / sc);
    }
    let g = v.tr_mul(&v);
    let eig = SymmetricEigen::new(g);
    let (mut imax, mut imin) = (0, 0);
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[imax] {
            imax = i;
        }
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
    }
    let (lmax, lmin) = (eig.eigenvalues[imax], eig.eigenvalues[imin]);
    if !(lmin > lmax * 1e-28) {
        return None;
    }
    let lk = 0.5 * (lmax.ln() - lmin.ln());
    if !want_grad {
        return Some((lk, None));
    }
    let mut grad = DMatrix::zeros(w.nrows(), w.ncols());
    for (idx, lam, wgt) in [(imax, lmax, 0.5 / lmax), (imin, lmin, -0.5 / lmin)] {
        let u = eig.eigenvectors.column(idx);
        let vu = &v * u;
        for c in 0..w.ncols() {
            let f = wgt * 2.0 * u[c] / s[c];
            if f == 0.0 {
                continue;
            }
            let k = lam * u[c] / n;
            for r in 0..w.nrows() {
                grad[(r, c)] += f * (vu[r] - v[(r, c)] * k);
            }
        }
    }
    Some((lk, Some(grad)))
}

#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    pub f_f: f64,
    pub n_h: usize,
    /// Objective grid size; defaults to one period at 200 Hz.
    pub n_s: Option<usize>,
    pub seed: u64,
    pub starts: usize,
    pub max_iter: usize,
    /// Fractional shrink of the limits while optimizing.
    pub margin: f64,
    /// Limits are enforced on `enforce_factor * n_s` points.
    pub enforce_factor: usize,
    /// Unshrunk limits are verified on `verify_factor * n_s` points.
    pub verify_factor: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            f_f: DEFAULT_FUNDAMENTAL_HZ,
            n_h: DEFAULT_HARMONICS,
            n_s: None,
            seed: 0,
            starts: 8,
            max_iter: 150,
            margin: 0.02,
            enforce_factor: 2,
            verify_factor: 10,
        }
    }
}

impl OptimizeOptions {
    pub fn sample_count(&self) -> usize {
        self.n_s.unwrap_or_else(|| default_sample_count(self.f_f))
    }
}

#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub seed_index: usize,
    pub initial_log_kappa: f64,
    pub final_log_kappa: f64,
    pub iterations: usize,
    pub verified: bool,
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub trajectory: FourierTrajectory,
    pub kappa: f64,
    pub log_kappa: f64,
    /// `log kappa` at each accepted iterate of the winning start.
    pub history: Vec<f64>,
    pub best_start: usize,
    pub starts: Vec<StartOutcome>,
    /// Smallest normalized slack of the unshrunk limits on the fine grid.
    pub verification_slack: f64,
}

/// Linear limit constraints `s = G x - h >= 0`, rows normalized by range.
struct Constraints {
    g: DMatrix<f64>,
    h: DVector<f64>,
}

impl Constraints {
    fn build(limits: &JointLimits, n_h: usize, w: f64, times: &[f64]) -> Self {
        let dof = limits.dof();
        let m = 1 + 2 * n_h;
        let rows = times.len() * dof * 4;
        let mut g = DMatrix::zeros(rows, dof * m);
        let mut h = DVector::zeros(rows);
        let mut r = 0;
        for &t in times {
            let bs = basis(n_h, w, t);
            for j in 0..dof {
                let qr = limits.q_max[j] - limits.q_min[j];
                let vr = limits.qd_max[j] - limits.qd_min[j];
                for (row, lim, sign, scale) in [
                    (&bs.pos, limits.q_min[j], 1.0, qr),
                    (&bs.pos, limits.q_max[j], -1.0, qr),
                    (&bs.vel, limits.qd_min[j], 1.0, vr),
                    (&bs.vel, limits.qd_max[j], -1.0, vr),
                ] {
                    for (i, c) in row.iter().enumerate() {
                        g[(r, j * m + i)] = sign * c / scale;
                    }
                    h[r] = sign * lim / scale;
                    r += 1;
                }
            }
        }
        Constraints { g, h }
    }

    fn slack(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.g * x - &self.h
    }
}

fn fine_times(period: f64, n: usize) -> Vec<f64> {
    let dt = period / n as f64;
    (0..n).map(|i| i as f64 * dt).collect()
}

struct Objective<'a> {
    model: &'a RobotModel,
    cols: Vec<usize>,
    n_h: usize,
    times: Vec<f64>,
    bases: Vec<Basis>,
    dof: usize,
}

impl Objective<'_> {
    fn state(&self, x: &DVector<f64>, s: usize) -> JointState {
        let m = 1 + 2 * self.n_h;
        let b = &self.bases[s];
        let mut q = DVector::zeros(self.dof);
        let mut qd = DVector::zeros(self.dof);
        let mut qdd = DVector::zeros(self.dof);
        for j in 0..self.dof {
            let c = &x.as_slice()[j * m..(j + 1) * m];
            q[j] = dot(&b.pos, c);
            qd[j] = dot(&b.vel, c);
            qdd[j] = dot(&b.acc, c);
        }
        JointState::new(q, qd, qdd)
    }

    fn y_base(&self, st: &JointState) -> Result<DMatrix<f64>> {
        let y = dynamics::regressor(self.model, st)?;
        Ok(y.select_columns(self.cols.iter()))
    }

    fn stack(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let nb = self.cols.len();
        let mut w = DMatrix::zeros(self.times.len() * self.dof, nb);
        for s in 0..self.times.len() {
            let yb = self.y_base(&self.state(x, s))?;
            w.view_mut((s * self.dof, 0), (self.dof, nb)).copy_from(&yb);
        }
        Ok(w)
    }

    fn log_kappa(&self, x: &DVector<f64>) -> Result<Option<f64>> {
        let w = self.stack(x)?;
        Ok(log_kappa_with_grad(&w, false).map(|(v, _)| v))
    }

    /// Gradient of `log kappa` with respect to the coefficients, by chain
    /// rule through per-sample regressor sensitivities.
    fn gradient(&self, x: &DVector<f64>) -> Result<Option<(f64, DVector<f64>)>> {
        let w = self.stack(x)?;
        let Some((lk, Some(gw))) = log_kappa_with_grad(&w, true) else {
            return Ok(None);
        };
        let m = 1 + 2 * self.n_h;
        let dof = self.dof;
        let nb = self.cols.len();
        let mut grad = DVector::zeros(x.len());
        for s in 0..self.times.len() {
            let st = self.state(x, s);
            let d = gw.view((s * dof, 0), (dof, nb));
            let y0 = w.view((s * dof, 0), (dof, nb));
            let contract = |y: &DMatrix<f64>, h: f64| -> f64 {
                let mut acc = 0.0;
                for c in 0..nb {
                    for r in 0..dof {
                        acc += d[(r, c)] * (y[(r, c)] - y0[(r, c)]);
                    }
                }
                acc / h
            };
            let b = &self.bases[s];
            for j in 0..dof {
                let hq = 1e-6 * (1.0 + st.q[j].abs());
                let mut sq = st.clone();
                sq.q[j] += hq;
                let gq = contract(&self.y_base(&sq)?, hq);

                let hv = 1e-6 * (1.0 + st.qd[j].abs());
                let mut sv = st.clone();
                sv.qd[j] += hv;
                let gv = contract(&self.y_base(&sv)?, hv);

                // The regressor is affine in acceleration, so a unit step is exact.
                let mut sa = st.clone();
                sa.qdd[j] += 1.0;
                let ga = contract(&self.y_base(&sa)?, 1.0);

                for i in 0..m {
                    grad[j * m + i] += gq * b.pos[i] + gv * b.vel[i] + ga * b.acc[i];
                }
            }
        }
        Ok(Some((lk, grad)))
    }
}

/// A strictly feasible random trajectory: random offset and decaying random
/// harmonics scaled so worst-case excursions stay inside `limits`.
pub fn random_feasible(limits: &JointLimits, f_f: f64, n_h: usize, rng: &mut impl Rng) -> FourierTrajectory {
    let dof = limits.dof();
    let mut t = FourierTrajectory::zeros(dof, f_f, n_h);
    let w = t.omega();
    for j in 0..dof {
        let c = 0.5 * (limits.q_min[j] + limits.q_max[j]);
        let hr = 0.5 * (limits.q_max[j] - limits.q_min[j]);
        let vmax = limits.qd_max[j].min(-limits.qd_min[j]);
        t.q0[j] = c + rng.random_range(-0.2..0.2) * hr;
        let mut aq = 0.0;
        let mut av = 0.0;
        for k in 0..n_h {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            t.a[j][k] = a;
            t.b[j][k] = b;
            aq += (a.abs() + b.abs()) / ((k + 1) as f64 * w);
            av += a.abs() + b.abs();
        }
        let room = hr - (t.q0[j] - c).abs();
        let fill = rng.random_range(0.6..0.95);
        let scale = if aq > 0.0 { fill * (room / aq).min(vmax / av) } else { 0.0 };
        for k in 0..n_h {
            t.a[j][k] *= scale;
            t.b[j][k] *= scale;
        }
    }
    t
}

/// Smallest normalized slack of `traj` against `limits` on `n` uniform times.
pub fn limit_slack(traj: &FourierTrajectory, limits: &JointLimits, n: usize) -> f64 {
    let c = Constraints::build(limits, traj.n_h, traj.omega(), &fine_times(traj.period(), n));
    c.slack(&traj.to_x()).min()
}

struct StartResult {
    x: DVector<f64>,
    log_kappa: f64,
    initial: f64,
    history: Vec<f64>,
    iterations: usize,
}

fn run_start(
    obj: &Objective,
    cons: &Constraints,
    x0: DVector<f64>,
    max_iter: usize,
) -> Result<Option<StartResult>> {
    let mc = cons.h.len() as f64;
    let mus = [1e-2, 1e-4];
    let barrier = |s: &DVector<f64>, mu: f64| -> f64 { -mu / mc * s.iter().map(|v| v.ln()).sum::<f64>() };
    let barrier_grad = |s: &DVector<f64>, mu: f64| -> DVector<f64> {
        let inv = s.map(|v| -mu / (mc * v));
        cons.g.tr_mul(&inv)
    };

    let mut x = x0;
    let Some((mut lk, mut gk)) = obj.gradient(&x)? else {
        return Ok(None);
    };
    let initial = lk;
    let mut history = vec![lk];
    let mut iterations = 0;
    let n = x.len();
    let per_stage = max_iter.div_ceil(mus.len());

    for &mu in &mus {
        let mut s = cons.slack(&x);
        let mut phi = lk + barrier(&s, mu);
        let mut g = &gk + barrier_grad(&s, mu);
        let mut hinv = DMatrix::<f64>::identity(n, n);
        let mut scaled = false;
        let mut stall = 0;
        for _ in 0..per_stage {
            let mut d = -(&hinv * &g);
            if d.dot(&g) >= 0.0 {
                hinv = DMatrix::identity(n, n);
                d = -g.clone();
            }
            // Largest step keeping every linear constraint strictly satisfied.
            let ds = &cons.g * &d;
            let mut amax = f64::INFINITY;
            for i in 0..ds.len() {
                if ds[i] < 0.0 {
                    amax = amax.min(-s[i] / ds[i]);
                }
            }
            let mut alpha = 1.0f64.min(0.99 * amax);
            let slope = g.dot(&d);
            let mut accepted = None;
            for _ in 0..30 {
                let xn = &x + &d * alpha;
                let sn = cons.slack(&xn);
                if sn.min() > 0.0 {
                    if let Some(lkn) = obj.log_kappa(&xn)? {
                        let phin = lkn + barrier(&sn, mu);
                        if phin <= phi + 1e-4 * alpha * slope && lkn <= lk {
                            accepted = Some((xn, sn, lkn, phin));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            let Some((xn, sn, lkn, phin)) = accepted else {
                break;
            };
            let Some((lkg, gkn)) = obj.gradient(&xn)? else {
                break;
            };
            debug_assert!((lkg - lkn).abs() < 1e-9);
            let gn = &gkn + barrier_grad(&sn, mu);
            let step = &xn - &x;
            let yv = &gn - &g;
            let sy = step.dot(&yv);
            if sy > 1e-12 * step.norm() * yv.norm() {
                if !scaled {
                    hinv *= sy / yv.norm_squared();
                    scaled = true;
                }
                let rho = 1.0 / sy;
                let hy = &hinv * &yv;
                let yhy = yv.dot(&hy);
                hinv += (&step * step.transpose()) * (rho * rho * yhy + rho)
                    - (&hy * step.transpose() + &step * hy.transpose()) * rho;
            }
            let improvement = phi - phin;
            x = xn;
            s = sn;
            phi = phin;
            lk = lkn;
            gk = gkn;
            g = gn;
            history.push(lk);
            iterations += 1;
            if improvement < 1e-7 {
                stall += 1;
                if stall >= 3 {
                    break;
                }
            } else {
                stall = 0;
            }
        }
    }
    Ok(Some(StartResult {
        x,
        log_kappa: lk,
        initial,
        history,
        iterations,
    }))
}

pub fn optimize_trajectory(
    model: &RobotModel,
    base: &BaseParameterization,
    limits: &JointLimits,
    opts: &OptimizeOptions,
) -> Result<OptimizeReport> {
    limits.validate()?;
    limits.check_dof(model.dof())?;
    let dof = model.dof();
    let n_s = opts.sample_count();
    if n_s * dof < base.n_b {
        return Err(Error::InsufficientSamples(format!(
            "{n_s} samples for {} base parameters",
            base.n_b
        )));
    }
    let probe = FourierTrajectory::zeros(dof, opts.f_f, opts.n_h);
    let period = probe.period();
    let w = probe.omega();
    let times = uniform_times(&probe, n_s);
    let obj = Objective {
        model,
        cols: base.base_indices(),
        n_h: opts.n_h,
        bases: times.iter().map(|&t| basis(opts.n_h, w, t)).collect(),
        times,
        dof,
    };
    let shrunk = limits.shrink(opts.margin);
    let cons = Constraints::build(&shrunk, opts.n_h, w, &fine_times(period, n_s * opts.enforce_factor.max(1)));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let seeds: Vec<u64> = (0..opts.starts).map(|_| rng.next_u64()).collect();

    let results = crate::par_map(&seeds, |&sd| -> Result<Option<StartResult>> {
        let mut r = ChaCha8Rng::seed_from_u64(sd);
        let x0 = random_feasible(&shrunk, opts.f_f, opts.n_h, &mut r).to_x();
        run_start(&obj, &cons, x0, opts.max_iter)
    });

    let fine = opts.verify_factor.max(1) * n_s;
    let mut outcomes = Vec::new();
    let mut best: Option<(usize, StartResult, f64)> = None;
    for (i, r) in results.into_iter().enumerate() {
        let Some(r) = r? else {
            continue;
        };
        let traj = FourierTrajectory::from_x(dof, opts.f_f, opts.n_h, &r.x);
        let slack = limit_slack(&traj, limits, fine);
        let verified = slack >= 0.0;
        outcomes.push(StartOutcome {
            seed_index: i,
            initial_log_kappa: r.initial,
            final_log_kappa: r.log_kappa,
            iterations: r.iterations,
            verified,
        });
        if verified && best.as_ref().is_none_or(|(_, b, _)| r.log_kappa < b.log_kappa) {
            best = Some((i, r, slack));
        }
    }
    let Some((best_start, r, slack)) = best else {
        return Err(Error::Infeasible(format!(
            "no feasible, well-posed trajectory found after {} starts",
            opts.starts
        )));
    };
    Ok(OptimizeReport {
        trajectory: FourierTrajectory::from_x(dof, opts.f_f, opts.n_h, &r.x),
        kappa: r.log_kappa.exp(),
        log_kappa: r.log_kappa,
        history: r.history,
        best_start,
        starts: outcomes,
        verification_slack: slack,
    })
}

/// RMS-scaled condition number of a trajectory's stacked base regressor.
pub fn trajectory_kappa(
    model: &RobotModel,
    base: &BaseParameterization,
    traj: &FourierTrajectory,
    n_s: usize,
) -> Result<f64> {
    condition_number(&stack_regressor(model, base, traj, n_s)?, true)
}
