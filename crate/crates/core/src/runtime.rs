//! Model-based feedforward and simulated experiments: open-loop gravity holds
//! against a plant with static friction, sinusoidal tracking under PD control
//! with and without feedforward, and a timing benchmark.
//!
//! All vectors are in motor coordinates unless a name says otherwise.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseparams::random_state;
use crate::dynamics::{self, DynamicParameters, JointState};
use crate::error::{Error, Result};
use crate::excitation::JointLimits;
use crate::ident::{StaticsModel, STATICS_JOINTS};
use crate::kinematics::{JointKind, RobotModel};
use crate::signals::TrajectoryLog;

pub const DEFAULT_CONTROL_RATE_HZ: f64 = 100.0;
pub const DEFAULT_PLANT_RATE_HZ: f64 = 1000.0;
pub const DEFAULT_HOLD_S: f64 = 5.0;
pub const DEFAULT_SETTLE_S: f64 = 3.0;
/// Drift thresholds for revolute (rad) and prismatic (m) joints.
pub const DRIFT_ANGLE: f64 = std::f64::consts::PI / 180.0;
pub const DRIFT_DISTANCE: f64 = 1e-3;
/// Joints the experiments evaluate.
pub const EVALUATED_JOINTS: usize = STATICS_JOINTS;

/// Gravity feedforward `tau_g(q) = ID(q, 0, 0)`: gravity, springs and the
/// friction bias, with no velocity-dependent friction.
pub fn gravity_torque(model: &RobotModel, params: &DynamicParameters, q: &DVector<f64>) -> Result<DVector<f64>> {
    computed_torque(model, params, q, &DVector::zeros(q.len()), &DVector::zeros(q.len()))
}

/// Computed-torque feedforward `M(q) qdd_des + C(q, qd) + G(q)` at measured
/// position and velocity.
pub fn computed_torque(
    model: &RobotModel,
    params: &DynamicParameters,
    q_meas: &DVector<f64>,
    qd_meas: &DVector<f64>,
    qdd_des: &DVector<f64>,
) -> Result<DVector<f64>> {
    dynamics::inverse_dynamics(
        model,
        params,
        &JointState::new(q_meas.clone(), qd_meas.clone(), qdd_des.clone()),
    )
}

/// Gravity predicted by the statics-only model: the leading joints only,
/// zero elsewhere, with no spring or bias terms.
pub fn statics_gravity(model: &RobotModel, statics: &StaticsModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    let g = statics.predict(model, q)?;
    let mut out = DVector::zeros(q.len());
    out.rows_mut(0, g.len()).copy_from(&g);
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub enum GravityModel<'a> {
    Full(&'a DynamicParameters),
    Statics(&'a StaticsModel),
}

impl GravityModel<'_> {
    pub fn torque(&self, model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            GravityModel::Full(p) => gravity_torque(model, p, q),
            GravityModel::Statics(s) => statics_gravity(model, s, q),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GravityModel::Full(_) => "full",
            GravityModel::Statics(_) => "statics",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Pid,
    PidGravity(GravityModel<'a>),
    PidComputedTorque(&'a DynamicParameters),
}

impl Controller<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Pid => "pid",
            Controller::PidGravity(_) => "pid+gravity",
            Controller::PidComputedTorque(_) => "pid+ctff",
        }
    }

    fn feedforward(
        &self,
        model: &RobotModel,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        qdd_des: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        match self {
            Controller::Pid => Ok(DVector::zeros(q.len())),
            Controller::PidGravity(g) => g.torque(model, q),
            Controller::PidComputedTorque(p) => computed_torque(model, p, q, qd, qdd_des),
        }
    }
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text)
}

fn check_len(context: &'static str, v: &[f64], dof: usize) -> Result<()> {
    if v.len() != dof {
        return Err(Error::Dimension {
            context,
            expected: dof,
            got: v.len(),
        });
    }
    Ok(())
}

/// Joint-space PD regulator `tau = Kp (q_des - q) + Kd (qd_des - qd) + tau_ff`
/// sampled at `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidConfig {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub rate: f64,
}

impl PidConfig {
    pub fn psm_default() -> Self {
        PidConfig {
            kp: vec![40.0, 40.0, 800.0, 10.0, 10.0, 10.0, 10.0],
            kd: vec![3.0, 3.0, 40.0, 0.2, 0.2, 0.2, 0.2],
            rate: DEFAULT_CONTROL_RATE_HZ,
        }
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        check_len("proportional gains", &self.kp, dof)?;
        check_len("derivative gains", &self.kd, dof)?;
        if self.kp.iter().chain(&self.kd).any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::Config("gains must be finite and non-negative".into()));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::Config("control rate must be positive".into()));
        }
        Ok(())
    }

    pub fn feedback(
        &self,
        q_des: &DVector<f64>,
        qd_des: &DVector<f64>,
        q: &DVector<f64>,
        qd: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::from_fn(q.len(), |j, _| {
            self.kp[j] * (q_des[j] - q[j]) + self.kd[j] * (qd_des[j] - qd[j])
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_toml(path.as_ref())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("gains serialize")
    }
}

/// Simulated plant: true dynamics plus a symmetric static-friction band per
/// motor, integrated with RK4 at `rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    /// Largest net torque a resting motor withstands without moving.
    pub static_friction: Vec<f64>,
    pub rate: f64,
    /// Speed below which a motor may stick.
    pub stick_velocity: f64,
}

impl PlantConfig {
    pub fn psm_default() -> Self {
        PlantConfig {
            static_friction: vec![0.8, 0.8, 2.0, 0.0, 0.0, 0.0, 0.0],
            rate: DEFAULT_PLANT_RATE_HZ,
            stick_velocity: 1e-3,
        }
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        check_len("static friction", &self.static_friction, dof)?;
        if self.static_friction.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::Config("static friction must be finite and non-negative".into()));
        }
        if !(self.rate > 0.0) || !(self.stick_velocity > 0.0) {
            return Err(Error::Config("plant rate and stick velocity must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_toml(path.as_ref())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plant serializes")
    }
}

/// Sinusoidal test reference in dVRK joint space: joints 1 and 2 swing by
/// `alpha_ori`, joint 3 oscillates about `q3_offset` by `alpha_pos`, and the
/// wrist stays at zero. The phase advances `omega_gen` radians per control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestTrajectoryConfig {
    pub alpha_ori: f64,
    pub alpha_pos: f64,
    pub omega_gen: f64,
    pub q3_offset: f64,
}

impl Default for TestTrajectoryConfig {
    fn default() -> Self {
        TestTrajectoryConfig {
            alpha_ori: 20f64.to_radians(),
            alpha_pos: 0.05,
            omega_gen: 0.005,
            q3_offset: 0.12,
        }
    }
}

impl TestTrajectoryConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_toml(path.as_ref())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("test trajectory serializes")
    }

    pub fn validate(&self, model: &RobotModel, limits: &JointLimits) -> Result<()> {
        if ![self.alpha_ori, self.alpha_pos, self.omega_gen, self.q3_offset].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("test trajectory values must be finite".into()));
        }
        if self.alpha_ori < 0.0 || self.alpha_pos < 0.0 || !(self.omega_gen > 0.0) {
            return Err(Error::Config("amplitudes must be non-negative and omega_gen positive".into()));
        }
        let dof = model.dof();
        limits.check_dof(dof)?;
        let ext = |s: f64| model.dvrk_to_motor(&self.dvrk(s, 1.0).0);
        for s in [-1.0, 1.0] {
            let q = ext(s);
            for j in 0..dof {
                if q[j] < limits.q_min[j] || q[j] > limits.q_max[j] {
                    return Err(Error::Config(format!(
                        "test trajectory leaves the limits of joint {} ({:.4})",
                        j + 1,
                        q[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Angular frequency in rad/s at control rate `rate`.
    pub fn omega(&self, rate: f64) -> f64 {
        self.omega_gen * rate
    }

    pub fn period(&self, rate: f64) -> f64 {
        2.0 * std::f64::consts::PI / self.omega(rate)
    }

    /// dVRK-space position and velocity for phase sine `s` and cosine `c`
    /// (velocity per unit phase rate).
    fn dvrk(&self, s: f64, c: f64) -> (DVector<f64>, DVector<f64>) {
        let mut q = DVector::zeros(7);
        let mut v = DVector::zeros(7);
        q[0] = self.alpha_ori * s;
        q[1] = self.alpha_ori * s;
        q[2] = self.q3_offset + self.alpha_pos * s;
        v[0] = self.alpha_ori * c;
        v[1] = self.alpha_ori * c;
        v[2] = self.alpha_pos * c;
        (q, v)
    }

    /// Motor-space reference position and velocity at time `t`.
    pub fn reference(&self, model: &RobotModel, t: f64, rate: f64) -> (DVector<f64>, DVector<f64>) {
        let w = self.omega(rate);
        let (q, v) = self.dvrk((w * t).sin(), (w * t).cos());
        (model.dvrk_to_motor(&q), model.dvrk_to_motor(&(v * w)))
    }
}

/// Plant state with Karnopp-style stick-slip: a resting motor stays locked
/// while the torque needed to hold it lies within its friction band.
pub struct Plant<'a> {
    model: &'a RobotModel,
    params: &'a DynamicParameters,
    band: Vec<f64>,
    stick_velocity: f64,
    dt: f64,
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    stuck: Vec<bool>,
}

impl<'a> Plant<'a> {
    /// A plant at rest at `q0`.
    pub fn new(model: &'a RobotModel, params: &'a DynamicParameters, cfg: &PlantConfig, q0: DVector<f64>) -> Result<Self> {
        cfg.validate(model.dof())?;
        check_len("initial position", q0.as_slice(), model.dof())?;
        Ok(Plant {
            model,
            params,
            band: cfg.static_friction.clone(),
            stick_velocity: cfg.stick_velocity,
            dt: 1.0 / cfg.rate,
            qd: DVector::zeros(q0.len()),
            q: q0,
            stuck: cfg.static_friction.iter().map(|b| *b > 0.0).collect(),
        })
    }

    pub fn stuck(&self) -> &[bool] {
        &self.stuck
    }

    /// Accelerations with `locked` motors held still, and the torques the
    /// locks must supply.
    fn locked_dynamics(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        tau: &DVector<f64>,
        locked: &[bool],
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = q.len();
        let m = dynamics::mass_matrix(self.model, self.params, q)?;
        let bias = dynamics::inverse_dynamics(self.model, self.params, &JointState::new(q.clone(), v.clone(), DVector::zeros(n)))?;
        let r = tau - bias;
        let free: Vec<usize> = (0..n).filter(|&j| !locked[j]).collect();
        let mut a = DVector::zeros(n);
        if !free.is_empty() {
            let mff = DMatrix::from_fn(free.len(), free.len(), |i, k| m[(free[i], free[k])]);
            let rf = DVector::from_fn(free.len(), |i, _| r[free[i]]);
            let chol = mff
                .cholesky()
                .ok_or_else(|| Error::DegenerateModel("mass matrix not positive definite".into()))?;
            let af = chol.solve(&rf);
            for (i, &j) in free.iter().enumerate() {
                a[j] = af[i];
            }
        }
        let mut hold = DVector::zeros(n);
        for j in (0..n).filter(|&j| locked[j]) {
            hold[j] = (m.row(j) * &a)[0] - r[j];
        }
        Ok((a, hold))
    }

    /// Decides which slow motors stick under `tau`, releasing the most
    /// overloaded lock until every remaining one is within its band.
    fn update_stuck(&mut self, tau: &DVector<f64>) -> Result<()> {
        let n = self.q.len();
        let mut locked: Vec<bool> = (0..n)
            .map(|j| self.band[j] > 0.0 && (self.stuck[j] || self.qd[j].abs() < self.stick_velocity))
            .collect();
        let mut v = self.qd.clone();
        for j in 0..n {
            if locked[j] {
                v[j] = 0.0;
            }
        }
        while locked.iter().any(|l| *l) {
            let (_, hold) = self.locked_dynamics(&self.q, &v, tau, &locked)?;
            let worst = (0..n)
                .filter(|&j| locked[j] && hold[j].abs() > self.band[j])
                .max_by(|&i, &k| (hold[i].abs() / self.band[i]).total_cmp(&(hold[k].abs() / self.band[k])));
            match worst {
                Some(j) => {
                    locked[j] = false;
                    v[j] = self.qd[j];
                }
                None => break,
            }
        }
        self.stuck = locked;
        self.qd = v;
        Ok(())
    }

    /// One integration substep under constant torque.
    pub fn step(&mut self, tau: &DVector<f64>) -> Result<()> {
        self.update_stuck(tau)?;
        let locked = self.stuck.clone();
        let dt = self.dt;
        let f = |q: &DVector<f64>, v: &DVector<f64>| self.locked_dynamics(q, v, tau, &locked).map(|r| r.0);
        let (q, qd) = (&self.q, &self.qd);
        let a1 = f(q, qd)?;
        let q2 = q + qd * (dt / 2.0);
        let v2 = qd + &a1 * (dt / 2.0);
        let a2 = f(&q2, &v2)?;
        let q3 = q + &v2 * (dt / 2.0);
        let v3 = qd + &a2 * (dt / 2.0);
        let a3 = f(&q3, &v3)?;
        let q4 = q + &v3 * dt;
        let v4 = qd + &a3 * dt;
        let a4 = f(&q4, &v4)?;
        let qn = q + (qd + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
        let mut vn = qd + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
        // A sliding motor whose velocity reverses passes through rest.
        for j in 0..vn.len() {
            if self.band[j] > 0.0 && vn[j] * self.qd[j] < 0.0 {
                vn[j] = 0.0;
            }
        }
        if qn.iter().chain(vn.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Unstable("plant state is not finite".into()));
        }
        self.q = qn;
        self.qd = vn;
        Ok(())
    }

    /// Integrates `duration` seconds under constant torque.
    pub fn advance(&mut self, tau: &DVector<f64>, duration: f64) -> Result<()> {
        let steps = (duration / self.dt).round().max(1.0) as usize;
        for _ in 0..steps {
            self.step(tau)?;
        }
        Ok(())
    }
}

fn threshold(model: &RobotModel, j: usize) -> f64 {
    match model.joint_kind(j) {
        JointKind::Prismatic => DRIFT_DISTANCE,
        _ => DRIFT_ANGLE,
    }
}

fn head(v: &DVector<f64>, n: usize) -> Vec<f64> {
    v.iter().take(n).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftOptions {
    pub hold: f64,
    pub settle: f64,
    pub pid: PidConfig,
    pub plant: PlantConfig,
    pub limits: JointLimits,
}

impl DriftOptions {
    pub fn psm_default() -> Self {
        DriftOptions {
            hold: DEFAULT_HOLD_S,
            settle: DEFAULT_SETTLE_S,
            pid: PidConfig::psm_default(),
            plant: PlantConfig::psm_default(),
            limits: JointLimits::psm_default(),
        }
    }
}

/// One pose of a drift test; vectors cover the evaluated joints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftPose {
    pub index: usize,
    pub q_des: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    /// Desired minus measured position at the end of the PD settle.
    pub pd_error: Vec<f64>,
    /// Desired minus measured position at the end of the open-loop hold.
    pub gc_error: Vec<f64>,
    pub pd_torque: Vec<f64>,
    /// Compensation torque commanded at the start of the hold.
    pub gc_torque: Vec<f64>,
    /// Range of torque that keeps the true plant at rest at the hold pose.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub within_bounds: Vec<bool>,
    /// Largest displacement during the hold.
    pub excursion: Vec<f64>,
    pub drift: Vec<bool>,
}

impl DriftPose {
    pub fn drifted(&self) -> bool {
        self.drift.iter().any(|d| *d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub compensator: String,
    pub hold: f64,
    pub drift_angle: f64,
    pub drift_distance: f64,
    pub drift_poses: usize,
    pub skipped_poses: usize,
    #[serde(rename = "pose")]
    pub poses: Vec<DriftPose>,
}

impl DriftReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("drift report serializes")
    }

    /// One row per evaluated pose and joint.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "pose,joint,q_des,pd_error,gc_error,pd_torque,gc_torque,lower,upper,within_bounds,excursion,drift\n",
        );
        for p in self.poses.iter().filter(|p| p.skipped.is_none()) {
            for j in 0..p.drift.len() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    p.index,
                    j + 1,
                    p.q_des[j],
                    p.pd_error[j],
                    p.gc_error[j],
                    p.pd_torque[j],
                    p.gc_torque[j],
                    p.lower[j],
                    p.upper[j],
                    p.within_bounds[j],
                    p.excursion[j],
                    p.drift[j]
                ));
            }
        }
        out
    }
}

fn control_steps(duration: f64, rate: f64) -> usize {
    (duration * rate).round() as usize
}

/// Holds one pose: PD settle, then open-loop gravity on the evaluated joints
/// while the wrist stays under PD.
fn drift_pose(
    model: &RobotModel,
    params_true: &DynamicParameters,
    compensator: GravityModel,
    index: usize,
    q_des: &DVector<f64>,
    opts: &DriftOptions,
) -> Result<DriftPose> {
    let n = model.dof();
    let ne = EVALUATED_JOINTS.min(n);
    let mut pose = DriftPose {
        index,
        q_des: q_des.iter().copied().collect(),
        skipped: None,
        pd_error: vec![],
        gc_error: vec![],
        pd_torque: vec![],
        gc_torque: vec![],
        lower: vec![],
        upper: vec![],
        within_bounds: vec![],
        excursion: vec![],
        drift: vec![],
    };
    if let Some(j) = (0..n).find(|&j| !(q_des[j] >= opts.limits.q_min[j] && q_des[j] <= opts.limits.q_max[j])) {
        pose.skipped = Some(format!("joint {} target {:.4} is outside its limits", j + 1, q_des[j]));
        return Ok(pose);
    }
    let period = 1.0 / opts.pid.rate;
    let zero = DVector::zeros(n);
    let mut plant = Plant::new(model, params_true, &opts.plant, q_des.clone())?;
    let mut tau = DVector::zeros(n);
    for _ in 0..control_steps(opts.settle, opts.pid.rate) {
        tau = opts.pid.feedback(q_des, &zero, &plant.q, &plant.qd);
        plant.advance(&tau, period)?;
    }
    pose.pd_error = head(&(q_des - &plant.q), ne);
    pose.pd_torque = head(&tau, ne);
    let q_start = plant.q.clone();
    let g_start = compensator.torque(model, &q_start)?;
    let hold = gravity_torque(model, params_true, &q_start)?;
    let mut excursion = vec![0.0f64; ne];
    for _ in 0..control_steps(opts.hold, opts.pid.rate) {
        let g = compensator.torque(model, &plant.q)?;
        let pd = opts.pid.feedback(q_des, &zero, &plant.q, &plant.qd);
        let mut tau = g.clone();
        for j in ne..n {
            tau[j] += pd[j];
        }
        plant.advance(&tau, period)?;
        for (j, e) in excursion.iter_mut().enumerate() {
            *e = e.max((plant.q[j] - q_start[j]).abs());
        }
    }
    pose.gc_error = head(&(q_des - &plant.q), ne);
    pose.gc_torque = head(&g_start, ne);
    pose.lower = (0..ne).map(|j| hold[j] - opts.plant.static_friction[j]).collect();
    pose.upper = (0..ne).map(|j| hold[j] + opts.plant.static_friction[j]).collect();
    pose.within_bounds = (0..ne).map(|j| pose.gc_torque[j] >= pose.lower[j] && pose.gc_torque[j] <= pose.upper[j]).collect();
    pose.drift = (0..ne).map(|j| excursion[j] > threshold(model, j)).collect();
    pose.excursion = excursion;
    Ok(pose)
}

/// Open-loop gravity hold at each pose against the true plant with static
/// friction. Poses outside the limits are skipped with a note.
pub fn simulate_drift_test(
    model: &RobotModel,
    params_true: &DynamicParameters,
    compensator: GravityModel,
    poses: &[DVector<f64>],
    opts: &DriftOptions,
) -> Result<DriftReport> {
    let n = model.dof();
    opts.pid.validate(n)?;
    opts.plant.validate(n)?;
    opts.limits.check_dof(n)?;
    if !(opts.hold > 0.0) || !(opts.settle >= 0.0) {
        return Err(Error::Precondition("hold must be positive and settle non-negative".into()));
    }
    for q in poses {
        check_len("pose", q.as_slice(), n)?;
    }
    let indexed: Vec<(usize, &DVector<f64>)> = poses.iter().enumerate().collect();
    let results = crate::par_map(&indexed, |(i, q)| drift_pose(model, params_true, compensator, *i, q, opts));
    let poses: Vec<DriftPose> = results.into_iter().collect::<Result<_>>()?;
    Ok(DriftReport {
        compensator: compensator.name().into(),
        hold: opts.hold,
        drift_angle: DRIFT_ANGLE,
        drift_distance: DRIFT_DISTANCE,
        drift_poses: poses.iter().filter(|p| p.drifted()).count(),
        skipped_poses: poses.iter().filter(|p| p.skipped.is_some()).count(),
        poses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub rmse: f64,
    pub max: f64,
}

impl ErrorStats {
    /// Mean, population standard deviation, root mean square and largest
    /// magnitude of a series.
    pub fn from_series(x: &[f64]) -> Self {
        let n = x.len().max(1) as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        ErrorStats {
            mean,
            std: var.sqrt(),
            rmse: (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            max: x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingOptions {
    pub pid: PidConfig,
    pub plant: PlantConfig,
    pub trajectory: TestTrajectoryConfig,
    pub limits: JointLimits,
    /// Trial length in seconds; `None` runs one reference period.
    pub duration: Option<f64>,
    /// Regulation at the first reference point before the trial starts.
    pub settle: f64,
}

impl TrackingOptions {
    pub fn psm_default() -> Self {
        TrackingOptions {
            pid: PidConfig::psm_default(),
            plant: PlantConfig::psm_default(),
            trajectory: TestTrajectoryConfig::default(),
            limits: JointLimits::psm_default(),
            duration: None,
            settle: DEFAULT_SETTLE_S,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration.unwrap_or_else(|| self.trajectory.period(self.pid.rate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingReport {
    pub controller: String,
    pub duration: f64,
    pub samples: usize,
    /// Measured minus desired position per joint.
    pub position: Vec<ErrorStats>,
    /// Feedback torque per joint.
    pub torque: Vec<ErrorStats>,
    /// Applied torques at the control rate.
    #[serde(skip)]
    pub trace: TrajectoryLog,
    /// Desired positions at the control rate.
    #[serde(skip)]
    pub q_des: DMatrix<f64>,
}

impl TrackingReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("tracking report serializes")
    }

    /// Table of statistics for the evaluated joints.
    pub fn table(&self) -> String {
        let mut out = format!("{}\n", self.controller);
        out.push_str("joint  quantity  mean         std          rmse         max\n");
        for (what, stats) in [("q_err", &self.position), ("tau_fb", &self.torque)] {
            for (j, s) in stats.iter().enumerate().take(EVALUATED_JOINTS) {
                out.push_str(&format!(
                    "{:<6} {:<9} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e}\n",
                    j + 1,
                    what,
                    s.mean,
                    s.std,
                    s.rmse,
                    s.max
                ));
            }
        }
        out
    }
}

/// Tracks the sinusoidal test reference on the plant with the given
/// controller. Statistics cover the trial window after the settle.
pub fn simulate_tracking(
    model: &RobotModel,
    params_true: &DynamicParameters,
    controller: Controller,
    opts: &TrackingOptions,
) -> Result<TrackingReport> {
    let n = model.dof();
    opts.pid.validate(n)?;
    opts.plant.validate(n)?;
    opts.trajectory.validate(model, &opts.limits)?;
    let duration = opts.duration();
    if !(duration > 0.0) || !(opts.settle >= 0.0) {
        return Err(Error::Precondition("duration must be positive and settle non-negative".into()));
    }
    let rate = opts.pid.rate;
    let dt = 1.0 / rate;
    let traj = &opts.trajectory;
    let widened: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let span = opts.limits.q_max[j] - opts.limits.q_min[j];
            (opts.limits.q_min[j] - span, opts.limits.q_max[j] + span)
        })
        .collect();
    let check = |q: &DVector<f64>, t: f64| -> Result<()> {
        match (0..n).find(|&j| q[j] < widened[j].0 || q[j] > widened[j].1) {
            Some(j) => Err(Error::Unstable(format!(
                "{}: joint {} reached {:.4} at t = {:.2} s",
                controller.name(),
                j + 1,
                q[j],
                t
            ))),
            None => Ok(()),
        }
    };

    let (q0, _) = traj.reference(model, 0.0, rate);
    let zero = DVector::zeros(n);
    let mut plant = Plant::new(model, params_true, &opts.plant, q0.clone())?;
    for k in 0..control_steps(opts.settle, rate) {
        let ff = controller.feedforward(model, &plant.q, &plant.qd, &zero)?;
        let tau = opts.pid.feedback(&q0, &zero, &plant.q, &plant.qd) + ff;
        plant.advance(&tau, dt)?;
        check(&plant.q, k as f64 * dt - opts.settle)?;
    }

    let steps = control_steps(duration, rate);
    let mut q_err = vec![Vec::with_capacity(steps); n];
    let mut fb = vec![Vec::with_capacity(steps); n];
    let mut times = Vec::with_capacity(steps);
    let mut q_log = DMatrix::zeros(steps, n);
    let mut qd_log = DMatrix::zeros(steps, n);
    let mut tau_log = DMatrix::zeros(steps, n);
    let mut q_des_log = DMatrix::zeros(steps, n);
    for k in 0..steps {
        let t = k as f64 * dt;
        let (q_des, qd_des) = traj.reference(model, t, rate);
        let (_, qd_prev) = traj.reference(model, t - dt, rate);
        let qdd_des = (&qd_des - qd_prev) * rate;
        let pd = opts.pid.feedback(&q_des, &qd_des, &plant.q, &plant.qd);
        let ff = controller.feedforward(model, &plant.q, &plant.qd, &qdd_des)?;
        let tau = &pd + ff;
        times.push(t);
        q_log.set_row(k, &plant.q.transpose());
        qd_log.set_row(k, &plant.qd.transpose());
        tau_log.set_row(k, &tau.transpose());
        q_des_log.set_row(k, &q_des.transpose());
        for j in 0..n {
            q_err[j].push(plant.q[j] - q_des[j]);
            fb[j].push(pd[j]);
        }
        plant.advance(&tau, dt)?;
        check(&plant.q, t + dt)?;
    }
    Ok(TrackingReport {
        controller: controller.name().into(),
        duration,
        samples: steps,
        position: q_err.iter().map(|e| ErrorStats::from_series(e)).collect(),
        torque: fb.iter().map(|e| ErrorStats::from_series(e)).collect(),
        trace: TrajectoryLog::new(times, q_log, qd_log, tau_log)?,
        q_des: q_des_log,
    })
}

/// Runs independent tracking trials, one per controller, in parallel.
pub fn compare_controllers(
    model: &RobotModel,
    params_true: &DynamicParameters,
    controllers: &[Controller],
    opts: &TrackingOptions,
) -> Result<Vec<TrackingReport>> {
    crate::par_map(controllers, |c| simulate_tracking(model, params_true, *c, opts))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchStats {
    pub n: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Wall time of single computed-torque evaluations at `n` seeded random
/// states within `limits`.
pub fn benchmark_runtime(
    model: &RobotModel,
    params: &DynamicParameters,
    limits: &JointLimits,
    n: usize,
    seed: u64,
) -> Result<BenchStats> {
    if n < 100 {
        return Err(Error::Precondition(format!("benchmark needs at least 100 states, got {n}")));
    }
    limits.check_dof(model.dof())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<JointState> = (0..n).map(|_| random_state(limits, &mut rng)).collect();
    let mut ms = Vec::with_capacity(n);
    for s in &states {
        let t0 = Instant::now();
        let tau = computed_torque(model, params, &s.q, &s.qd, &s.qdd)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(tau);
    }
    let mean = ms.iter().sum::<f64>() / n as f64;
    let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(BenchStats {
        n,
        mean_ms: mean,
        std_ms: var.sqrt(),
    })
}
