//! Inverse dynamics, the linear-in-parameters regressor, mass matrix and
//! forward dynamics for the coupled mechanism.
//!
//! Link-inertia torques are computed by recursive Newton-Euler on the
//! spanning tree in expanded coordinates and projected to motor space through
//! the constant Jacobian `dq/dq_m`. Friction, motor inertia and springs act
//! on element coordinates and project through `A_c`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::{JointKind, RobotModel};

pub const INERTIAL_PER_LINK: usize = 10;
pub const ADDITIONAL_PER_LINK: usize = 5;
pub const PARAMS_PER_LINK: usize = INERTIAL_PER_LINK + ADDITIONAL_PER_LINK;
pub const DEFAULT_EPSILON: f64 = 100.0;

/// Offsets of the additional parameters within a link block.
pub mod slot {
    pub const IXX: usize = 0;
    pub const IXY: usize = 1;
    pub const IXZ: usize = 2;
    pub const IYY: usize = 3;
    pub const IYZ: usize = 4;
    pub const IZZ: usize = 5;
    pub const HX: usize = 6;
    pub const MASS: usize = 9;
    pub const FV: usize = 10;
    pub const FC: usize = 11;
    pub const FB: usize = 12;
    pub const IM: usize = 13;
    pub const KS: usize = 14;
}

const INERTIAL_NAMES: [&str; 10] = ["Ixx", "Ixy", "Ixz", "Iyy", "Iyz", "Izz", "hx", "hy", "hz", "m"];
const ADDITIONAL_NAMES: [&str; 5] = ["Fv", "Fc", "Fb", "Im", "Ks"];

/// Barycentric inertial parameters of one link, referred to the link frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinkInertialParams {
    pub ixx: f64,
    pub ixy: f64,
    pub ixz: f64,
    pub iyy: f64,
    pub iyz: f64,
    pub izz: f64,
    pub h: Vector3<f64>,
    pub m: f64,
}

impl LinkInertialParams {
    /// From mass, centre of mass and the inertia tensor about the COM, using
    /// the parallel axis theorem.
    pub fn from_com(m: f64, com: Vector3<f64>, inertia_com: Matrix3<f64>) -> Self {
        let s = com.cross_matrix();
        let i = inertia_com + m * s.transpose() * s;
        LinkInertialParams {
            ixx: i[(0, 0)],
            ixy: i[(0, 1)],
            ixz: i[(0, 2)],
            iyy: i[(1, 1)],
            iyz: i[(1, 2)],
            izz: i[(2, 2)],
            h: com * m,
            m,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        LinkInertialParams {
            ixx: v[0],
            ixy: v[1],
            ixz: v[2],
            iyy: v[3],
            iyz: v[4],
            izz: v[5],
            h: Vector3::new(v[6], v[7], v[8]),
            m: v[9],
        }
    }

    pub fn to_array(&self) -> [f64; 10] {
        [
            self.ixx, self.ixy, self.ixz, self.iyy, self.iyz, self.izz, self.h.x, self.h.y,
            self.h.z, self.m,
        ]
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.ixx, self.ixy, self.ixz, self.ixy, self.iyy, self.iyz, self.ixz, self.iyz,
            self.izz,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdditionalParams {
    pub fv: f64,
    pub fc: f64,
    pub fb: f64,
    pub im: f64,
    pub ks: f64,
}

impl AdditionalParams {
    pub fn from_slice(v: &[f64]) -> Self {
        AdditionalParams {
            fv: v[0],
            fc: v[1],
            fb: v[2],
            im: v[3],
            ks: v[4],
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.fv, self.fc, self.fb, self.im, self.ks]
    }
}

/// Full parameter vector: per link `[theta_L (10), theta_A (5)]` in link order.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicParameters {
    pub values: DVector<f64>,
}

impl DynamicParameters {
    pub fn zeros(model: &RobotModel) -> Self {
        DynamicParameters {
            values: DVector::zeros(model.n_links() * PARAMS_PER_LINK),
        }
    }

    pub fn from_vector(model: &RobotModel, values: DVector<f64>) -> Result<Self> {
        let p = model.n_links() * PARAMS_PER_LINK;
        if values.len() != p {
            return Err(Error::Dimension {
                context: "dynamic parameters",
                expected: p,
                got: values.len(),
            });
        }
        Ok(DynamicParameters { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn link(&self, k: usize) -> LinkInertialParams {
        let o = k * PARAMS_PER_LINK;
        LinkInertialParams::from_slice(&self.values.as_slice()[o..o + INERTIAL_PER_LINK])
    }

    pub fn set_link(&mut self, k: usize, p: &LinkInertialParams) {
        let o = k * PARAMS_PER_LINK;
        for (i, v) in p.to_array().iter().enumerate() {
            self.values[o + i] = *v;
        }
    }

    pub fn additional(&self, k: usize) -> AdditionalParams {
        let o = k * PARAMS_PER_LINK + INERTIAL_PER_LINK;
        AdditionalParams::from_slice(&self.values.as_slice()[o..o + ADDITIONAL_PER_LINK])
    }

    pub fn set_additional(&mut self, k: usize, p: &AdditionalParams) {
        let o = k * PARAMS_PER_LINK + INERTIAL_PER_LINK;
        for (i, v) in p.to_array().iter().enumerate() {
            self.values[o + i] = *v;
        }
    }

    /// Header names in parameter order, e.g. `L2_Ixx`, `A4_Ks`.
    pub fn names(model: &RobotModel) -> Vec<String> {
        let mut out = Vec::with_capacity(model.n_links() * PARAMS_PER_LINK);
        for l in &model.links {
            out.extend(INERTIAL_NAMES.iter().map(|n| format!("L{}_{}", l.id, n)));
            out.extend(ADDITIONAL_NAMES.iter().map(|n| format!("A{}_{}", l.id, n)));
        }
        out
    }

    pub fn to_csv(&self, model: &RobotModel) -> String {
        let names = Self::names(model);
        let vals: Vec<String> = self.values.iter().map(|v| format!("{v:.17e}")).collect();
        format!("{}\n{}\n", names.join(","), vals.join(","))
    }

    pub fn from_csv(model: &RobotModel, text: &str) -> Result<Self> {
        let path = Path::new("<params>");
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            msg: "empty parameter file".into(),
        })?;
        let names = Self::names(model);
        let got: Vec<&str> = header.split(',').map(str::trim).collect();
        if got.len() != names.len() || got.iter().zip(&names).any(|(a, b)| a != b) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "parameter header does not match the model".into(),
            });
        }
        let row = lines.next().ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 2,
            msg: "missing value row".into(),
        })?;
        let vals: std::result::Result<Vec<f64>, _> =
            row.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Parse {
            path: path.into(),
            line: 2,
            msg: e.to_string(),
        })?;
        if vals.len() != names.len() || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.into(),
                line: 2,
                msg: "value row must hold one finite number per header column".into(),
            });
        }
        Ok(DynamicParameters {
            values: DVector::from_vec(vals),
        })
    }
}

/// Indices of parameters that are not structurally zero for `model`.
pub fn active_mask(model: &RobotModel) -> Vec<bool> {
    let mut mask = Vec::with_capacity(model.n_links() * PARAMS_PER_LINK);
    for l in &model.links {
        let inertial = l.flags.link_inertia && l.frame.is_some();
        mask.extend(std::iter::repeat_n(inertial, INERTIAL_PER_LINK));
        mask.extend([
            l.flags.friction,
            l.flags.friction,
            l.flags.friction,
            l.flags.motor_inertia,
            l.flags.spring,
        ]);
    }
    mask
}

pub fn active_indices(model: &RobotModel) -> Vec<usize> {
    active_mask(model)
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.then_some(i))
        .collect()
}

/// Velocity smoothing of the tanh Coulomb term, one entry per model link.
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionConfig {
    pub epsilon: Vec<f64>,
}

/// Linear spring elongation `dl = motor . q_m + offset` attached to `link`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spring {
    pub link: usize,
    pub motor: DVector<f64>,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpringConfig {
    pub springs: Vec<Spring>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, qd: DVector<f64>, qdd: DVector<f64>) -> Self {
        JointState { q, qd, qdd }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        JointState {
            q,
            qd: DVector::zeros(n),
            qdd: DVector::zeros(n),
        }
    }
}

/// Per-element friction `Fv cd + Fc tanh(eps cd) + Fb`; zero for elements
/// without friction.
pub fn friction_torque(
    model: &RobotModel,
    params: &DynamicParameters,
    cd: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(
        model.n_links(),
        model.links.iter().enumerate().map(|(k, l)| {
            if !l.flags.friction {
                return 0.0;
            }
            let a = params.additional(k);
            a.fv * cd[k] + a.fc * (model.friction.epsilon[k] * cd[k]).tanh() + a.fb
        }),
    )
}

/// Spring generalized force in motor space.
pub fn spring_torque(model: &RobotModel, params: &DynamicParameters, q_m: &DVector<f64>) -> DVector<f64> {
    let mut tau = DVector::zeros(model.dof());
    for s in &model.springs.springs {
        let ks = params.additional(s.link).ks;
        let dl = s.motor.dot(q_m) + s.offset;
        tau += &s.motor * (ks * dl);
    }
    tau
}

/// Frame kinematics of the spanning tree, each quantity in its own link frame.
#[derive(Debug, Clone)]
pub(crate) struct TreeKinematics {
    /// Rotation of link k relative to its parent.
    pub rot: Vec<Matrix3<f64>>,
    /// Origin of link k in its parent frame.
    pub pos: Vec<Vector3<f64>>,
    pub w: Vec<Vector3<f64>>,
    pub wd: Vec<Vector3<f64>>,
    pub vd: Vec<Vector3<f64>>,
}

pub(crate) fn forward_pass(
    model: &RobotModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    qdd: &DVector<f64>,
    gravity: &Vector3<f64>,
) -> TreeKinematics {
    let n = model.n_kinematic();
    let mut tk = TreeKinematics {
        rot: Vec::with_capacity(n),
        pos: Vec::with_capacity(n),
        w: Vec::with_capacity(n),
        wd: Vec::with_capacity(n),
        vd: Vec::with_capacity(n),
    };
    let z = Vector3::z();
    let base_acc = -gravity;
    for k in 0..n {
        let f = model.frame(k);
        let (r, p) = f.local(q[k]);
        let (w_p, wd_p, vd_p) = match f.parent {
            Some(pi) => (tk.w[pi], tk.wd[pi], tk.vd[pi]),
            None => (Vector3::zeros(), Vector3::zeros(), base_acc),
        };
        let rt = r.transpose();
        let mut vd = rt * (wd_p.cross(&p) + w_p.cross(&w_p.cross(&p)) + vd_p);
        let w_in = rt * w_p;
        let (w, wd) = match f.kind {
            JointKind::Revolute => (
                w_in + z * qd[k],
                rt * wd_p + w_in.cross(&(z * qd[k])) + z * qdd[k],
            ),
            JointKind::Prismatic => {
                vd += 2.0 * w_in.cross(&(z * qd[k])) + z * qdd[k];
                (w_in, rt * wd_p)
            }
            JointKind::Fixed => (w_in, rt * wd_p),
        };
        tk.rot.push(r);
        tk.pos.push(p);
        tk.w.push(w);
        tk.wd.push(wd);
        tk.vd.push(vd);
    }
    tk
}

fn joint_projection(kind: JointKind, f: &Vector3<f64>, n: &Vector3<f64>) -> f64 {
    match kind {
        JointKind::Revolute => n.z,
        JointKind::Prismatic => f.z,
        JointKind::Fixed => 0.0,
    }
}

/// Link-inertia generalized forces on the expanded tree coordinates.
fn tree_torques(model: &RobotModel, params: &DynamicParameters, tk: &TreeKinematics) -> DVector<f64> {
    let n = model.n_kinematic();
    let mut f = vec![Vector3::zeros(); n];
    let mut nn = vec![Vector3::zeros(); n];
    for k in 0..n {
        let li = model.kinematic[k];
        if !model.links[li].flags.link_inertia {
            continue;
        }
        let p = params.link(li);
        let i = p.inertia();
        let (w, wd, vd) = (tk.w[k], tk.wd[k], tk.vd[k]);
        f[k] = p.m * vd + wd.cross(&p.h) + w.cross(&w.cross(&p.h));
        nn[k] = i * wd + w.cross(&(i * w)) + p.h.cross(&vd);
    }
    let mut tau = DVector::zeros(n);
    for k in (0..n).rev() {
        let fr = model.frame(k);
        tau[k] = joint_projection(fr.kind, &f[k], &nn[k]);
        if let Some(pi) = fr.parent {
            let rf = tk.rot[k] * f[k];
            let rn = tk.rot[k] * nn[k] + tk.pos[k].cross(&rf);
            f[pi] += rf;
            nn[pi] += rn;
        }
    }
    tau
}

fn check_inputs(model: &RobotModel, params: &DynamicParameters, state: &JointState) -> Result<()> {
    let p = model.n_links() * PARAMS_PER_LINK;
    if params.len() != p {
        return Err(Error::Dimension {
            context: "inverse_dynamics parameters",
            expected: p,
            got: params.len(),
        });
    }
    for v in [&state.q, &state.qd, &state.qdd] {
        if v.len() != model.dof() {
            return Err(Error::Dimension {
                context: "inverse_dynamics state",
                expected: model.dof(),
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Motor torques for the given state, with an explicit gravity vector.
pub fn inverse_dynamics_with_gravity(
    model: &RobotModel,
    params: &DynamicParameters,
    state: &JointState,
    gravity: &Vector3<f64>,
) -> Result<DVector<f64>> {
    check_inputs(model, params, state)?;
    let x = model.expand_coordinates(&state.q, &state.qd, &state.qdd)?;
    let tk = forward_pass(model, &x.q, &x.qd, &x.qdd, gravity);
    let tau_q = tree_torques(model, params, &tk);
    let jq = &model.maps.motor_to_q;
    let jc = &model.maps.complete;

    let mut tau = jq.tr_mul(&tau_q);
    let mut elem = friction_torque(model, params, &x.cd);
    for (k, l) in model.links.iter().enumerate() {
        if l.flags.motor_inertia {
            elem[k] += params.additional(k).im * x.cdd[k];
        }
    }
    tau += jc.tr_mul(&elem);
    tau += spring_torque(model, params, &state.q);
    Ok(tau)
}

/// Motor torques `tau_m(q_m, qd_m, qdd_m; theta)`.
pub fn inverse_dynamics(
    model: &RobotModel,
    params: &DynamicParameters,
    state: &JointState,
) -> Result<DVector<f64>> {
    inverse_dynamics_with_gravity(model, params, state, &model.gravity)
}

/// Regressor `Y` with `Y theta = inverse_dynamics(theta)`; dof x p, with
/// structurally-zero columns left at zero.
pub fn regressor(model: &RobotModel, state: &JointState) -> Result<DMatrix<f64>> {
    let p = model.n_links() * PARAMS_PER_LINK;
    for v in [&state.q, &state.qd, &state.qdd] {
        if v.len() != model.dof() {
            return Err(Error::Dimension {
                context: "regressor state",
                expected: model.dof(),
                got: v.len(),
            });
        }
    }
    let x = model.expand_coordinates(&state.q, &state.qd, &state.qdd)?;
    let tk = forward_pass(model, &x.q, &x.qd, &x.qdd, &model.gravity);
    let nk = model.n_kinematic();
    let jq = &model.maps.motor_to_q;
    let jc = &model.maps.complete;
    let dof = model.dof();
    let mut y = DMatrix::zeros(dof, p);

    let mut tau_q = vec![0.0; nk];
    for k in 0..nk {
        let li = model.kinematic[k];
        if !model.links[li].flags.link_inertia {
            continue;
        }
        let (w, wd, vd) = (tk.w[k], tk.wd[k], tk.vd[k]);
        for s in 0..INERTIAL_PER_LINK {
            let (f, n) = unit_wrench(s, &w, &wd, &vd);
            tau_q.iter_mut().for_each(|t| *t = 0.0);
            let (mut f, mut n) = (f, n);
            let mut j = k;
            loop {
                let fr = model.frame(j);
                tau_q[j] = joint_projection(fr.kind, &f, &n);
                match fr.parent {
                    Some(pi) => {
                        let rf = tk.rot[j] * f;
                        n = tk.rot[j] * n + tk.pos[j].cross(&rf);
                        f = rf;
                        j = pi;
                    }
                    None => break,
                }
            }
            let col = li * PARAMS_PER_LINK + s;
            for i in 0..dof {
                let mut acc = 0.0;
                for (jj, t) in tau_q.iter().enumerate() {
                    if *t != 0.0 {
                        acc += jq[(jj, i)] * t;
                    }
                }
                y[(i, col)] = acc;
            }
        }
    }

    for (k, l) in model.links.iter().enumerate() {
        let base = k * PARAMS_PER_LINK;
        if l.flags.friction {
            let cd = x.cd[k];
            let th = (model.friction.epsilon[k] * cd).tanh();
            for i in 0..dof {
                let a = jc[(k, i)];
                y[(i, base + slot::FV)] = a * cd;
                y[(i, base + slot::FC)] = a * th;
                y[(i, base + slot::FB)] = a;
            }
        }
        if l.flags.motor_inertia {
            for i in 0..dof {
                y[(i, base + slot::IM)] = jc[(k, i)] * x.cdd[k];
            }
        }
    }
    for s in &model.springs.springs {
        let dl = s.motor.dot(&state.q) + s.offset;
        let col = s.link * PARAMS_PER_LINK + slot::KS;
        for i in 0..dof {
            y[(i, col)] += s.motor[i] * dl;
        }
    }
    Ok(y)
}

/// Force and moment about the link origin for a unit value of inertial slot `s`.
fn unit_wrench(
    s: usize,
    w: &Vector3<f64>,
    wd: &Vector3<f64>,
    vd: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    match s {
        0..=5 => {
            let mut e = Matrix3::zeros();
            let (a, b) = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)][s];
            e[(a, b)] = 1.0;
            e[(b, a)] = 1.0;
            (Vector3::zeros(), e * wd + w.cross(&(e * w)))
        }
        6..=8 => {
            let mut h = Vector3::zeros();
            h[s - 6] = 1.0;
            (wd.cross(&h) + w.cross(&w.cross(&h)), h.cross(vd))
        }
        _ => (*vd, Vector3::zeros()),
    }
}

/// Joint-space mass matrix in motor coordinates.
pub fn mass_matrix(model: &RobotModel, params: &DynamicParameters, q_m: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = model.dof();
    let g0 = Vector3::zeros();
    let zero = DVector::zeros(n);
    let base = inverse_dynamics_with_gravity(
        model,
        params,
        &JointState::new(q_m.clone(), zero.clone(), zero.clone()),
        &g0,
    )?;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let col = inverse_dynamics_with_gravity(
            model,
            params,
            &JointState::new(q_m.clone(), zero.clone(), e),
            &g0,
        )? - &base;
        m.set_column(i, &col);
    }
    Ok(m)
}

/// `qdd = M^-1 (tau - bias(q, qd))`.
pub fn forward_dynamics(
    model: &RobotModel,
    params: &DynamicParameters,
    q_m: &DVector<f64>,
    qd_m: &DVector<f64>,
    tau_m: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = mass_matrix(model, params, q_m)?;
    let bias = inverse_dynamics(
        model,
        params,
        &JointState::new(q_m.clone(), qd_m.clone(), DVector::zeros(model.dof())),
    )?;
    solve_spd(m, tau_m - bias)
}

pub(crate) fn solve_spd(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let min_eig = sym.clone().symmetric_eigenvalues().min();
    if !(min_eig > 1e-9) {
        return Err(Error::DegenerateModel(format!(
            "mass matrix not positive definite (min eigenvalue {min_eig:.3e})"
        )));
    }
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::DegenerateModel("Cholesky factorisation failed".into()))?;
    Ok(chol.solve(&rhs))
}

/// One classical RK4 step under constant motor torque.
pub fn rk4_step(
    model: &RobotModel,
    params: &DynamicParameters,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    tau: &DVector<f64>,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let f = |q: &DVector<f64>, v: &DVector<f64>| forward_dynamics(model, params, q, v, tau);
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
    let vn = qd + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
    Ok((qn, vn))
}

/// Kinetic energy `0.5 qd^T M qd`.
pub fn kinetic_energy(model: &RobotModel, params: &DynamicParameters, q: &DVector<f64>, qd: &DVector<f64>) -> Result<f64> {
    let m = mass_matrix(model, params, q)?;
    Ok(0.5 * qd.dot(&(m * qd)))
}

/// Gravitational plus spring potential energy, computed from frame placements.
pub fn potential_energy(model: &RobotModel, params: &DynamicParameters, q_m: &DVector<f64>) -> Result<f64> {
    let q = &model.maps.motor_to_q * q_m;
    let frames = model.frame_placements(&q)?;
    let mut e = 0.0;
    for (k, t) in frames.iter().enumerate() {
        let li = model.kinematic[k];
        if !model.links[li].flags.link_inertia {
            continue;
        }
        let p = params.link(li);
        let r = t.fixed_view::<3, 3>(0, 0);
        let o = t.fixed_view::<3, 1>(0, 3);
        e -= model.gravity.dot(&(o * p.m + r * p.h));
    }
    for s in &model.springs.springs {
        let dl = s.motor.dot(q_m) + s.offset;
        e += 0.5 * params.additional(s.link).ks * dl * dl;
    }
    Ok(e)
}
