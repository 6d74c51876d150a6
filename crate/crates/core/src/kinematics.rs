//! Manipulator model: a modified-DH spanning tree plus the constant linear
//! maps between motor, dVRK, basis, expanded and element coordinates.
//!
//! Coordinate families (all zero-based in code):
//!
//! * `q_m` motor coordinates (one per actuator)
//! * `q_d` dVRK joint coordinates, `q_d = A_md q_m`
//! * `q_b` basis joints, `q_b = A_db q_d` (inverse gripper map)
//! * `q` expanded tree coordinates, one per kinematic link, `q = A_bq q_b`
//! * `c` element coordinates, one per model row (kinematic links plus
//!   friction/motor elements such as `F67`, `M6`), `c = A_c q_m`
//!
//! Every map is constant, so velocities and accelerations map with the same
//! matrices and `dc/dq_m = A_c` everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use serde::Deserialize;

use crate::dynamics::{FrictionConfig, Spring, SpringConfig, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::expr::{self, AffineExpr, ExprError, Symbol};

/// Large Needle Driver coupling between motors 5..7 and dVRK joints 5..7.
pub const LND_COUPLING: [[f64; 3]; 3] = [
    [1.0186, 0.0, 0.0],
    [-0.8306, 0.6089, 0.6089],
    [0.0, -1.2177, 1.2177],
];

/// Bundled dVRK-Si PSM description with synthetic link lengths.
pub const PSM_SI_CONFIG: &str = include_str!("../data/psm_si.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Fixed,
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ElementFlags {
    pub link_inertia: bool,
    pub motor_inertia: bool,
    pub friction: bool,
    pub spring: bool,
}

/// Modified-DH frame of a kinematic link. `d` and `theta` hold the constant
/// parts; the joint-dependent part lives in the link's coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DhFrame {
    /// Index of the parent in the kinematic list, `None` for the base.
    pub parent: Option<usize>,
    pub a_prev: f64,
    pub alpha_prev: f64,
    pub d: f64,
    pub theta: f64,
    pub kind: JointKind,
    /// `(basis joint, coefficient)` driving this frame.
    pub driver: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DhLink {
    pub id: String,
    pub parent_id: Option<String>,
    /// `None` for elements that carry no frame (relative friction, motor models).
    pub frame: Option<DhFrame>,
    pub flags: ElementFlags,
}

#[derive(Debug, Clone)]
pub struct CoordinateMaps {
    /// q_b -> q (n_kin x n)
    pub basis_to_q: DMatrix<f64>,
    /// q_m -> q_d (n x n)
    pub motor_to_dvrk: DMatrix<f64>,
    pub dvrk_to_motor: DMatrix<f64>,
    /// q_d -> q_b (inverse gripper map)
    pub dvrk_to_basis: DMatrix<f64>,
    /// q_b -> q_d (gripper map)
    pub basis_to_dvrk: DMatrix<f64>,
    /// q_m -> c, one row per model link (n_links x n)
    pub complete: DMatrix<f64>,
    /// q_m -> q (n_kin x n)
    pub motor_to_q: DMatrix<f64>,
}

/// Expanded joint state in tree and element coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
    pub c: DVector<f64>,
    pub cd: DVector<f64>,
    pub cdd: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<DhLink>,
    /// Link indices of the kinematic links, in tree order.
    pub kinematic: Vec<usize>,
    pub maps: CoordinateMaps,
    pub gravity: Vector3<f64>,
    pub lengths: BTreeMap<String, f64>,
    pub friction: FrictionConfig,
    pub springs: SpringConfig,
    dof: usize,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Scalar {
    Num(f64),
    Expr(String),
}

#[derive(Debug, Deserialize)]
struct LinkToml {
    id: String,
    parent: Option<String>,
    a: Option<Scalar>,
    alpha: Option<Scalar>,
    d: Option<Scalar>,
    theta: Option<Scalar>,
    coordinate: Option<String>,
    #[serde(default)]
    inertia: bool,
    #[serde(default)]
    motor_inertia: bool,
    #[serde(default)]
    friction: bool,
    #[serde(default)]
    spring: bool,
    epsilon: Option<f64>,
    prolongation: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CouplingToml {
    block_start: Option<usize>,
    matrix: Option<Vec<Vec<f64>>>,
    gripper: Option<[usize; 2]>,
}

#[derive(Debug, Deserialize)]
struct GravityToml {
    vector: [f64; 3],
}

#[derive(Debug, Deserialize)]
struct ModelToml {
    name: Option<String>,
    dof: usize,
    #[serde(default)]
    lengths: BTreeMap<String, f64>,
    gravity: GravityToml,
    coupling: Option<CouplingToml>,
    links: Vec<LinkToml>,
}

fn expr_error(link: &str, e: ExprError) -> Error {
    match e {
        ExprError::UnknownName(name) => Error::UnknownLength {
            link: link.to_string(),
            name,
        },
        ExprError::Syntax(msg) | ExprError::Nonlinear(msg) => {
            Error::Config(format!("link `{link}`: {msg}"))
        }
    }
}

fn eval(link: &str, v: Option<&Scalar>, lengths: &BTreeMap<String, f64>) -> Result<AffineExpr> {
    match v {
        None => Ok(AffineExpr::default()),
        Some(Scalar::Num(x)) => Ok(AffineExpr {
            constant: *x,
            ..Default::default()
        }),
        Some(Scalar::Expr(s)) => expr::parse(s, lengths).map_err(|e| expr_error(link, e)),
    }
}

fn motor_row(e: &AffineExpr, basis_from_motor: &DMatrix<f64>, dof: usize, link: &str) -> Result<DVector<f64>> {
    let mut row = DVector::zeros(dof);
    for (sym, c) in &e.terms {
        match *sym {
            Symbol::Basis(j) if j < dof => row += basis_from_motor.row(j).transpose() * *c,
            Symbol::Motor(j) if j < dof => row[j] += *c,
            _ => {
                return Err(Error::Config(format!(
                    "link `{link}` references a joint beyond dof {dof}"
                )))
            }
        }
    }
    Ok(row)
}

/// Parses a model config document.
pub fn load_model(doc: &str) -> Result<RobotModel> {
    let raw: ModelToml = toml::from_str(doc).map_err(|e| Error::Config(e.to_string()))?;
    let dof = raw.dof;
    if dof == 0 {
        return Err(Error::Config("dof must be positive".into()));
    }
    let gravity = Vector3::from(raw.gravity.vector);
    if !(0.0..=20.0).contains(&gravity.norm()) {
        return Err(Error::Config(format!(
            "gravity magnitude {} outside [0, 20] m/s^2",
            gravity.norm()
        )));
    }

    let mut motor_to_dvrk = DMatrix::<f64>::identity(dof, dof);
    let mut dvrk_to_basis = DMatrix::<f64>::identity(dof, dof);
    let mut basis_to_dvrk = DMatrix::<f64>::identity(dof, dof);
    if let Some(c) = &raw.coupling {
        if let Some(m) = &c.matrix {
            let start = c.block_start.unwrap_or(1).max(1) - 1;
            let k = m.len();
            if start + k > dof || m.iter().any(|r| r.len() != k) {
                return Err(Error::Config("coupling block does not fit dof".into()));
            }
            for (i, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    motor_to_dvrk[(start + i, start + j)] = *v;
                }
            }
        }
        if let Some([i, j]) = c.gripper {
            if i == 0 || j == 0 || i > dof || j > dof || i == j {
                return Err(Error::Config("gripper indices out of range".into()));
            }
            let (i, j) = (i - 1, j - 1);
            for (r, c, v) in [(i, i, 0.5), (i, j, 0.5), (j, i, -1.0), (j, j, 1.0)] {
                basis_to_dvrk[(r, c)] = v;
            }
            for (r, c, v) in [(i, i, 1.0), (i, j, -0.5), (j, i, 1.0), (j, j, 0.5)] {
                dvrk_to_basis[(r, c)] = v;
            }
        }
    }
    let dvrk_to_motor = motor_to_dvrk
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Config("coupling matrix is singular".into()))?;
    let basis_from_motor = &dvrk_to_basis * &motor_to_dvrk;

    let mut links: Vec<DhLink> = Vec::with_capacity(raw.links.len());
    let mut kinematic = Vec::new();
    let mut kin_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut coord_rows: Vec<DVector<f64>> = Vec::new();
    let mut basis_rows: Vec<(usize, Option<(usize, f64)>)> = Vec::new();
    let mut epsilon = Vec::new();
    let mut springs = Vec::new();

    for lt in &raw.links {
        if links.iter().any(|l| l.id == lt.id) || lt.id == "0" {
            return Err(Error::Structure(format!("duplicate link id `{}`", lt.id)));
        }
        let flags = ElementFlags {
            link_inertia: lt.inertia,
            motor_inertia: lt.motor_inertia,
            friction: lt.friction,
            spring: lt.spring,
        };
        let link_index = links.len();
        let (frame, row) = if let Some(coord) = &lt.coordinate {
            if lt.inertia || lt.parent.is_some() {
                return Err(Error::Structure(format!(
                    "element `{}` has a coordinate expression and cannot carry a frame or link inertia",
                    lt.id
                )));
            }
            let e = expr::parse(coord, &raw.lengths).map_err(|e| expr_error(&lt.id, e))?;
            if !e.is_constant() && e.constant != 0.0 {
                return Err(Error::Config(format!(
                    "element `{}` coordinate must be linear (no offset)",
                    lt.id
                )));
            }
            (None, motor_row(&e, &basis_from_motor, dof, &lt.id)?)
        } else {
            let parent_id = lt.parent.clone().unwrap_or_else(|| "0".to_string());
            let parent = if parent_id == "0" {
                None
            } else {
                Some(*kin_index.get(&parent_id).ok_or_else(|| {
                    Error::Structure(format!(
                        "link `{}` references parent `{}` that is not declared before it",
                        lt.id, parent_id
                    ))
                })?)
            };
            let a = eval(&lt.id, lt.a.as_ref(), &raw.lengths)?;
            let alpha = eval(&lt.id, lt.alpha.as_ref(), &raw.lengths)?;
            let d = eval(&lt.id, lt.d.as_ref(), &raw.lengths)?;
            let theta = eval(&lt.id, lt.theta.as_ref(), &raw.lengths)?;
            if !a.is_constant() || !alpha.is_constant() {
                return Err(Error::Structure(format!(
                    "link `{}`: a and alpha must be constant",
                    lt.id
                )));
            }
            let (kind, dep) = match (d.is_constant(), theta.is_constant()) {
                (true, true) => (JointKind::Fixed, None),
                (false, true) => (JointKind::Prismatic, Some(&d)),
                (true, false) => (JointKind::Revolute, Some(&theta)),
                (false, false) => {
                    return Err(Error::Structure(format!(
                        "link `{}`: only one of d, theta may depend on a joint",
                        lt.id
                    )))
                }
            };
            let driver = match dep {
                None => None,
                Some(e) => {
                    if e.terms.len() != 1 {
                        return Err(Error::Structure(format!(
                            "link `{}` must depend on exactly one basis joint",
                            lt.id
                        )));
                    }
                    let (sym, c) = e.terms.iter().next().expect("one term");
                    match *sym {
                        Symbol::Basis(j) if j < dof => Some((j, *c)),
                        _ => {
                            return Err(Error::Structure(format!(
                                "link `{}` must be driven by a basis joint q1..q{dof}",
                                lt.id
                            )))
                        }
                    }
                }
            };
            let mut row = DVector::zeros(dof);
            if let Some((j, c)) = driver {
                row = basis_from_motor.row(j).transpose() * c;
            }
            let frame = DhFrame {
                parent,
                a_prev: a.constant,
                alpha_prev: alpha.constant,
                d: d.constant,
                theta: theta.constant,
                kind,
                driver,
            };
            kin_index.insert(lt.id.clone(), kinematic.len());
            basis_rows.push((kinematic.len(), driver));
            kinematic.push(link_index);
            (Some(frame), row)
        };
        epsilon.push(lt.epsilon.unwrap_or(DEFAULT_EPSILON));
        if let Some(eps) = lt.epsilon {
            if eps <= 0.0 {
                return Err(Error::Config(format!("link `{}`: epsilon must be > 0", lt.id)));
            }
        }
        if lt.spring {
            let (motor, offset) = match &lt.prolongation {
                Some(p) => {
                    let e = expr::parse(p, &raw.lengths).map_err(|e| expr_error(&lt.id, e))?;
                    (motor_row(&e, &basis_from_motor, dof, &lt.id)?, e.constant)
                }
                None => (row.clone(), 0.0),
            };
            springs.push(Spring {
                link: link_index,
                motor,
                offset,
            });
        }
        coord_rows.push(row);
        links.push(DhLink {
            id: lt.id.clone(),
            parent_id: if lt.coordinate.is_some() {
                None
            } else {
                Some(lt.parent.clone().unwrap_or_else(|| "0".into()))
            },
            frame,
            flags,
        });
    }
    if kinematic.is_empty() {
        return Err(Error::Structure("model has no kinematic links".into()));
    }

    let mut basis_to_q = DMatrix::zeros(kinematic.len(), dof);
    for (k, driver) in basis_rows {
        if let Some((j, c)) = driver {
            basis_to_q[(k, j)] = c;
        }
    }
    let mut complete = DMatrix::zeros(links.len(), dof);
    for (i, r) in coord_rows.iter().enumerate() {
        complete.row_mut(i).copy_from(&r.transpose());
    }
    let motor_to_q = &basis_to_q * &basis_from_motor;

    Ok(RobotModel {
        name: raw.name.unwrap_or_else(|| "model".into()),
        links,
        kinematic,
        maps: CoordinateMaps {
            basis_to_q,
            motor_to_dvrk,
            dvrk_to_motor,
            dvrk_to_basis,
            basis_to_dvrk,
            complete,
            motor_to_q,
        },
        gravity,
        lengths: raw.lengths,
        friction: FrictionConfig { epsilon },
        springs: SpringConfig { springs },
        dof,
    })
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<RobotModel> {
    let path = path.as_ref();
    let doc = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_model(&doc)
}

/// The bundled PSM model.
pub fn psm_si() -> RobotModel {
    load_model(PSM_SI_CONFIG).expect("bundled PSM config is valid")
}

/// Motor-to-dVRK joint map with the Large Needle Driver coupling.
pub fn motor_to_dvrk(q_m: &[f64; 7]) -> [f64; 7] {
    let mut q_d = *q_m;
    for (i, row) in LND_COUPLING.iter().enumerate() {
        q_d[4 + i] = row.iter().zip(&q_m[4..]).map(|(a, b)| a * b).sum();
    }
    q_d
}

/// Gripper map from basis jaw angles to the dVRK bisector/opening pair.
pub fn gripper_basis_to_dvrk(q6: f64, q7: f64) -> (f64, f64) {
    ((q6 + q7) / 2.0, q7 - q6)
}

pub fn gripper_dvrk_to_basis(q6_d: f64, q7_d: f64) -> (f64, f64) {
    (q6_d - q7_d / 2.0, q6_d + q7_d / 2.0)
}

/// Child pose in its parent frame for a modified-DH row:
/// `Rx(alpha) Tx(a) Rz(theta) Tz(d)`.
pub fn dh_transform(a: f64, alpha: f64, theta: f64, d: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let (sa, ca) = alpha.sin_cos();
    let (st, ct) = theta.sin_cos();
    let r = Matrix3::new(
        ct,
        -st,
        0.0,
        st * ca,
        ct * ca,
        -sa,
        st * sa,
        ct * sa,
        ca,
    );
    (r, Vector3::new(a, -sa * d, ca * d))
}

impl DhFrame {
    /// Rotation and offset of this frame relative to its parent at joint value `q`.
    pub fn local(&self, q: f64) -> (Matrix3<f64>, Vector3<f64>) {
        match self.kind {
            JointKind::Revolute => dh_transform(self.a_prev, self.alpha_prev, self.theta + q, self.d),
            JointKind::Prismatic => dh_transform(self.a_prev, self.alpha_prev, self.theta, self.d + q),
            JointKind::Fixed => dh_transform(self.a_prev, self.alpha_prev, self.theta, self.d),
        }
    }
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn n_kinematic(&self) -> usize {
        self.kinematic.len()
    }

    /// Number of non-basis kinematic coordinates.
    pub fn n_auxiliary(&self) -> usize {
        self.kinematic.len() - self.dof
    }

    pub fn frame(&self, k: usize) -> &DhFrame {
        self.links[self.kinematic[k]]
            .frame
            .as_ref()
            .expect("kinematic links carry a frame")
    }

    pub fn link_index(&self, id: &str) -> Option<usize> {
        self.links.iter().position(|l| l.id == id)
    }

    /// Kind of the joint primarily driven by basis joint `j` (coefficient +1).
    pub fn joint_kind(&self, j: usize) -> JointKind {
        (0..self.n_kinematic())
            .map(|k| self.frame(k))
            .find(|f| matches!(f.driver, Some((b, c)) if b == j && c == 1.0))
            .map(|f| f.kind)
            .unwrap_or(JointKind::Revolute)
    }

    /// dc/dq_m.
    pub fn coordinate_jacobian(&self) -> &DMatrix<f64> {
        &self.maps.complete
    }

    pub fn motor_to_dvrk(&self, q_m: &DVector<f64>) -> DVector<f64> {
        &self.maps.motor_to_dvrk * q_m
    }

    pub fn dvrk_to_motor(&self, q_d: &DVector<f64>) -> DVector<f64> {
        &self.maps.dvrk_to_motor * q_d
    }

    fn check_dim(&self, v: &DVector<f64>, n: usize, context: &'static str) -> Result<()> {
        if v.len() != n {
            return Err(Error::Dimension {
                context,
                expected: n,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// World pose of every kinematic link for expanded coordinates `q`.
    pub fn frame_placements(&self, q: &DVector<f64>) -> Result<Vec<Matrix4<f64>>> {
        self.check_dim(q, self.n_kinematic(), "frame_placements")?;
        let mut out: Vec<Matrix4<f64>> = Vec::with_capacity(self.n_kinematic());
        for k in 0..self.n_kinematic() {
            let f = self.frame(k);
            let (r, p) = f.local(q[k]);
            let mut local = Matrix4::identity();
            local.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            local.fixed_view_mut::<3, 1>(0, 3).copy_from(&p);
            let world = match f.parent {
                Some(pi) => out[pi] * local,
                None => local,
            };
            out.push(world);
        }
        Ok(out)
    }

    /// The frame origin of `link` and the origins of its direct child frames
    /// at zero coordinates, in the link frame. Empty for frameless links.
    pub fn link_points(&self, link: usize) -> Vec<Vector3<f64>> {
        let Some(k) = self.kinematic.iter().position(|&l| l == link) else {
            return Vec::new();
        };
        let mut pts = vec![Vector3::zeros()];
        pts.extend(
            (0..self.n_kinematic())
                .filter(|&c| self.frame(c).parent == Some(k))
                .map(|c| self.frame(c).local(0.0).1),
        );
        pts
    }

    /// Maps a motor-space state onto tree and element coordinates.
    pub fn expand_coordinates(
        &self,
        q_m: &DVector<f64>,
        qd_m: &DVector<f64>,
        qdd_m: &DVector<f64>,
    ) -> Result<ExpandedState> {
        for v in [q_m, qd_m, qdd_m] {
            self.check_dim(v, self.dof, "expand_coordinates")?;
        }
        let jq = &self.maps.motor_to_q;
        let jc = &self.maps.complete;
        Ok(ExpandedState {
            q: jq * q_m,
            qd: jq * qd_m,
            qdd: jq * qdd_m,
            c: jc * q_m,
            cd: jc * qd_m,
            cdd: jc * qdd_m,
        })
    }
}
