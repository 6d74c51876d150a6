//! Physically consistent parameter estimation by weighted least squares under
//! linear and pseudo-inertia constraints, the statics-only gravity fit and
//! the NRMSE metric.
//!
//! Both fits are convex quadratic programs over the nonnegative orthant and
//! 4x4 semidefinite cones. They are solved by a primal-dual interior point
//! method with Nesterov-Todd scaling. A tiny tie-break `rho |P_N (theta -
//! theta_c)|^2` picks, among equally good fits, the one closest to the
//! centre along the unidentifiable directions.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, slot, DynamicParameters, JointState, LinkInertialParams, PARAMS_PER_LINK};
use crate::error::{Error, Result};
use crate::kinematics::RobotModel;
use crate::signals::IdentificationProblem;
use crate::sim::{link_box, StaticSample};

pub const DEFAULT_MASS_BOUNDS: [f64; 2] = [1e-3, 50.0];
pub const DEFAULT_ELEMENT_BOUNDS: [f64; 2] = [1e-6, 1e3];
/// COM boxes span this multiple of the link's frame-origin extent.
pub const COM_BOX_SCALE: f64 = 1.5;
/// Added on every side of a COM box (m).
pub const COM_BOX_MARGIN: f64 = 0.05;
pub const FEASIBILITY_TOL: f64 = 1e-6;
/// Fewer static samples than this trigger a coverage warning.
pub const MIN_STATIC_SAMPLES: usize = 30;

/// Weight of the null-space tie-break relative to the normalized data term;
/// small enough not to bias the fit, large enough to keep the Newton system
/// definite along unconstrained null directions.
const TIE_WEIGHT: f64 = 1e-12;
const GAP_TOL: f64 = 1e-14;
const KKT_TOL: f64 = 1e-10;
/// Round-off allowance on constraints after the tie-break.
const SETTLE_TOL: f64 = 1e-12;
const ACCEPT_KKT: f64 = 1e-7;
const ACCEPT_GAP: f64 = 1e-9;
const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    /// Closed-form weighted least squares with the null-space tie-break.
    Unconstrained,
    /// Mass, COM box and element bounds.
    GravityOnly,
    /// Gravity-only constraints plus `D_k > 0` for every inertial link.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBounds {
    pub id: String,
    #[serde(skip)]
    pub link: usize,
    pub mass: [f64; 2],
    pub com_min: [f64; 3],
    pub com_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementBounds {
    pub id: String,
    #[serde(skip)]
    pub link: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fv: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fc: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub im: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConstraints {
    pub mode: ConstraintMode,
    #[serde(default)]
    pub links: Vec<LinkBounds>,
    #[serde(default)]
    pub elements: Vec<ElementBounds>,
}

impl ConsistencyConstraints {
    /// Default bounds: COM boxes enclosing the scaled frame-origin extent of
    /// each inertial link plus a margin, and generic positive ranges.
    pub fn defaults(model: &RobotModel, mode: ConstraintMode) -> Self {
        let mut links = Vec::new();
        let mut elements = Vec::new();
        for (k, l) in model.links.iter().enumerate() {
            if l.flags.link_inertia {
                let (c, e) = link_box(model, k);
                let half = e * COM_BOX_SCALE + Vector3::repeat(COM_BOX_MARGIN);
                links.push(LinkBounds {
                    id: l.id.clone(),
                    link: k,
                    mass: DEFAULT_MASS_BOUNDS,
                    com_min: (c - half).into(),
                    com_max: (c + half).into(),
                });
            }
            let f = &l.flags;
            if f.friction || f.motor_inertia || f.spring {
                let b = Some(DEFAULT_ELEMENT_BOUNDS);
                elements.push(ElementBounds {
                    id: l.id.clone(),
                    link: k,
                    fv: b.filter(|_| f.friction),
                    fc: b.filter(|_| f.friction),
                    im: b.filter(|_| f.motor_inertia),
                    ks: b.filter(|_| f.spring),
                });
            }
        }
        ConsistencyConstraints { mode, links, elements }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("constraints serialize")
    }

    /// Parses bounds and resolves link ids against `model`.
    pub fn from_toml(model: &RobotModel, text: &str) -> Result<Self> {
        let mut c: ConsistencyConstraints = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let find = |id: &str| {
            model
                .link_index(id)
                .ok_or_else(|| Error::Config(format!("constraints reference unknown link `{id}`")))
        };
        for l in &mut c.links {
            l.link = find(&l.id)?;
            if !model.links[l.link].flags.link_inertia {
                return Err(Error::Config(format!("link `{}` carries no link inertia", l.id)));
            }
        }
        for e in &mut c.elements {
            e.link = find(&e.id)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(model: &RobotModel, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(model, &text)
    }

    /// Infeasibility certificate: the first empty interval, if any.
    pub fn validate(&self) -> Result<()> {
        let check = |what: String, lo: f64, hi: f64, positive: bool| -> Result<()> {
            if !(lo < hi) {
                return Err(Error::Infeasible(format!("{what}: lower bound {lo} is not below upper bound {hi}")));
            }
            if positive && !(lo > 0.0) {
                return Err(Error::Infeasible(format!("{what}: lower bound {lo} must be positive")));
            }
            Ok(())
        };
        for l in &self.links {
            check(format!("L{} mass", l.id), l.mass[0], l.mass[1], true)?;
            for (c, axis) in ["x", "y", "z"].iter().enumerate() {
                check(format!("L{} COM {axis}", l.id), l.com_min[c], l.com_max[c], false)?;
            }
        }
        for e in &self.elements {
            for (name, b) in [("Fv", e.fv), ("Fc", e.fc), ("Im", e.im), ("Ks", e.ks)] {
                if let Some([lo, hi]) = b {
                    check(format!("A{} {name}", e.id), lo, hi, true)?;
                }
            }
        }
        Ok(())
    }

    /// Interior point used to start the solver and to pin unidentifiable
    /// directions: geometric-mean masses and element values, COM at the box
    /// centre and a small isotropic body filling the box.
    pub fn center(&self, n_links: usize) -> DynamicParameters {
        let mut v = DVector::zeros(n_links * PARAMS_PER_LINK);
        for l in &self.links {
            let m = (l.mass[0] * l.mass[1]).sqrt();
            let lo = Vector3::from(l.com_min);
            let hi = Vector3::from(l.com_max);
            let e = (hi - lo) * 0.5;
            let r2 = e.norm_squared() / 3.0;
            let lp = LinkInertialParams::from_com(m, (lo + hi) * 0.5, nalgebra::Matrix3::identity() * (m * r2 * 0.25));
            v.rows_mut(l.link * PARAMS_PER_LINK, 10).copy_from_slice(&lp.to_array());
        }
        for e in &self.elements {
            let base = e.link * PARAMS_PER_LINK;
            for (s, b) in [(slot::FV, e.fv), (slot::FC, e.fc), (slot::IM, e.im), (slot::KS, e.ks)] {
                if let Some([lo, hi]) = b {
                    v[base + s] = (lo * hi).sqrt();
                }
            }
        }
        DynamicParameters { values: v }
    }
}

/// `D = [tr(I)/2 I3 - I, h; h^T, m]`.
pub fn lmi_block(p: &LinkInertialParams) -> Matrix4<f64> {
    let i = p.inertia();
    let s = nalgebra::Matrix3::identity() * (0.5 * i.trace()) - i;
    let mut d = Matrix4::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&s);
    d.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.h);
    d.fixed_view_mut::<1, 3>(3, 0).copy_from(&p.h.transpose());
    d[(3, 3)] = p.m;
    d
}

/// `100 * RMS(tau - tau_hat) / RMS(tau)`.
pub fn nrmse(tau: &[f64], tau_hat: &[f64]) -> Result<f64> {
    if tau.len() != tau_hat.len() {
        return Err(Error::Dimension {
            context: "nrmse series",
            expected: tau.len(),
            got: tau_hat.len(),
        });
    }
    let ref_ss: f64 = tau.iter().map(|v| v * v).sum();
    if tau.is_empty() || ref_ss == 0.0 {
        return Err(Error::UndefinedMetric("reference series has zero RMS".into()));
    }
    let err_ss: f64 = tau.iter().zip(tau_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(100.0 * (err_ss / ref_ss).sqrt())
}

/// Independent check of every declared constraint on a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    /// `(constraint, signed slack)`; negative slack is a violation.
    pub slacks: Vec<(String, f64)>,
    pub lmi_min_eigenvalues: Vec<(String, f64)>,
    /// Triangle-inequality margins of the COM inertia, redundant with the LMI.
    pub triangle_margins: Vec<(String, f64)>,
}

impl Audit {
    pub fn violations(&self, tol: f64) -> Vec<String> {
        self.slacks
            .iter()
            .chain(self.lmi_min_eigenvalues.iter())
            .filter(|(_, s)| *s < -tol)
            .map(|(n, s)| format!("{n} ({s:.3e})"))
            .collect()
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.violations(tol).is_empty()
    }
}

pub fn audit(theta: &DynamicParameters, c: &ConsistencyConstraints) -> Audit {
    let mut slacks = Vec::new();
    let mut lmi = Vec::new();
    let mut tri = Vec::new();
    for l in &c.links {
        let p = theta.link(l.link);
        slacks.push((format!("L{} mass lower", l.id), p.m - l.mass[0]));
        slacks.push((format!("L{} mass upper", l.id), l.mass[1] - p.m));
        for (ax, name) in ["x", "y", "z"].iter().enumerate() {
            slacks.push((format!("L{} COM {name} lower", l.id), p.h[ax] - p.m * l.com_min[ax]));
            slacks.push((format!("L{} COM {name} upper", l.id), p.m * l.com_max[ax] - p.h[ax]));
        }
        if c.mode == ConstraintMode::Full {
            let ev = lmi_block(&p).symmetric_eigenvalues().min();
            lmi.push((format!("L{} pseudo-inertia", l.id), ev));
            if p.m > 0.0 {
                let r = p.h / p.m;
                let s = r.cross_matrix();
                let ic = p.inertia() - p.m * s.transpose() * s;
                let e = ic.symmetric_eigenvalues();
                let margin = (0..3).map(|i| e[(i + 1) % 3] + e[(i + 2) % 3] - e[i]).fold(f64::INFINITY, f64::min);
                tri.push((format!("L{} triangle", l.id), margin.min(e.min())));
            }
        }
    }
    for e in &c.elements {
        let a = theta.additional(e.link);
        for (name, b, v) in [("Fv", e.fv, a.fv), ("Fc", e.fc, a.fc), ("Im", e.im, a.im), ("Ks", e.ks, a.ks)] {
            if let Some([lo, hi]) = b {
                slacks.push((format!("A{} {name} lower", e.id), v - lo));
                slacks.push((format!("A{} {name} upper", e.id), hi - v));
            }
        }
    }
    Audit {
        slacks,
        lmi_min_eigenvalues: lmi,
        triangle_margins: tri,
    }
}

/// `coef . x - rhs >= 0`.
#[derive(Debug, Clone)]
struct LinCon {
    coef: Vec<(usize, f64)>,
    rhs: f64,
    name: String,
}

impl LinCon {
    fn slack(&self, x: &DVector<f64>) -> f64 {
        self.coef.iter().map(|&(i, c)| c * x[i]).sum::<f64>() - self.rhs
    }

    fn dot(&self, d: &DVector<f64>) -> f64 {
        self.coef.iter().map(|&(i, c)| c * d[i]).sum()
    }
}

/// `offset + sum_i x_i F_i` positive definite.
#[derive(Debug, Clone)]
struct LmiCon {
    offset: Matrix4<f64>,
    terms: Vec<(usize, Matrix4<f64>)>,
    name: String,
}

impl LmiCon {
    fn value(&self, x: &DVector<f64>) -> Matrix4<f64> {
        self.offset + self.delta(x)
    }

    fn delta(&self, d: &DVector<f64>) -> Matrix4<f64> {
        self.terms.iter().fold(Matrix4::zeros(), |acc, (i, f)| acc + f * d[*i])
    }
}

const LMI_DIM: usize = 10;

fn lmi_basis() -> [Matrix4<f64>; LMI_DIM] {
    std::array::from_fn(|j| {
        let mut v = [0.0; LMI_DIM];
        v[j] = 1.0;
        lmi_block(&LinkInertialParams::from_slice(&v))
    })
}

/// Convex program `min |A x - b|^2 / j0` subject to linear and
/// pseudo-inertia constraints, with ties broken towards `c` along `Q`.
struct Program {
    a: DMatrix<f64>,
    b: DVector<f64>,
    j0: f64,
    h_data: DMatrix<f64>,
    center: DVector<f64>,
    null_q: Option<DMatrix<f64>>,
    /// Orthonormal `[identifiable | unidentifiable]` basis for the Newton
    /// system, whose two blocks have curvatures of very different size.
    frame: Option<DMatrix<f64>>,
    tie_weight: f64,
    lin: Vec<LinCon>,
    lmi: Vec<LmiCon>,
}

struct Solution {
    x: DVector<f64>,
    iterations: usize,
    kkt_residual: f64,
    gap: f64,
    active: Vec<String>,
}

/// Dual variables: one per linear row, one 4x4 block per LMI.
#[derive(Clone)]
struct Dual {
    lin: DVector<f64>,
    lmi: Vec<Matrix4<f64>>,
}

/// Nesterov-Todd scaling at the current iterate. For each block `R` maps
/// both the slack and the dual to the same diagonal `lambda`:
/// `R^-1 S R^-T = R^T Z R = diag(lambda)`.
struct Scaling {
    r: Vec<Matrix4<f64>>,
    r_inv: Vec<Matrix4<f64>>,
    /// `W^-1 = R^-T R^-1`.
    w_inv: Vec<Matrix4<f64>>,
    lambda: Vec<Vector4<f64>>,
}

struct Step {
    x: DVector<f64>,
    s_lin: DVector<f64>,
    z_lin: DVector<f64>,
    s_lmi: Vec<Matrix4<f64>>,
    z_lmi: Vec<Matrix4<f64>>,
}

fn symmetrize(m: &Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest `alpha` (capped at `cap`) keeping `x + alpha dx >= 0`.
fn orthant_step(x: &DVector<f64>, dx: &DVector<f64>, cap: f64) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(cap, f64::min)
}

/// Largest `alpha` (capped at `cap`) keeping `x + alpha dx` positive
/// semidefinite, for positive definite `x`.
fn cone_step(x: &Matrix4<f64>, dx: &Matrix4<f64>, cap: f64) -> f64 {
    let Some(ch) = x.cholesky() else {
        return 0.0;
    };
    let li = ch.l().try_inverse().unwrap_or_else(Matrix4::zeros);
    let low = symmetrize(&(li * dx * li.transpose())).symmetric_eigenvalues().min();
    if low < 0.0 {
        cap.min(-1.0 / low)
    } else {
        cap
    }
}

impl Program {
    fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        center: DVector<f64>,
        null_basis: Option<DMatrix<f64>>,
        lin: Vec<LinCon>,
        lmi: Vec<LmiCon>,
    ) -> Result<Self> {
        let j0 = b.norm_squared();
        if !(j0 > 0.0) {
            return Err(Error::Precondition("all efforts are zero".into()));
        }
        let null_q = null_basis.filter(|nb| nb.ncols() > 0).map(|nb| nalgebra::QR::new(nb).q());
        // The data see only the identifiable directions; removing the
        // round-off leakage keeps residual noise from steering the tie-break.
        let mut a = a;
        if let Some(q) = &null_q {
            let aq = &a * q;
            a -= aq * q.transpose();
        }
        let h_data = a.tr_mul(&a) * (2.0 / j0);
        let frame = null_q.as_ref().map(|q| {
            let r = identifiable_basis(q, a.ncols());
            let mut t = DMatrix::zeros(a.ncols(), a.ncols());
            t.columns_mut(0, r.ncols()).copy_from(&r);
            t.columns_mut(r.ncols(), q.ncols()).copy_from(q);
            t
        });
        Ok(Program {
            a,
            b,
            j0,
            h_data,
            center,
            null_q,
            frame,
            tie_weight: TIE_WEIGHT,
            lin,
            lmi,
        })
    }

    fn cone_degree(&self) -> f64 {
        (self.lin.len() + 4 * self.lmi.len()).max(1) as f64
    }

    fn data(&self, x: &DVector<f64>) -> f64 {
        (&self.a * x - &self.b).norm_squared() / self.j0
    }

    fn strictly_feasible(&self, x: &DVector<f64>) -> bool {
        self.lin.iter().all(|c| c.slack(x) > 0.0) && self.lmi.iter().all(|l| l.value(x).cholesky().is_some())
    }

    fn slacks(&self, x: &DVector<f64>) -> (DVector<f64>, Vec<Matrix4<f64>>) {
        (
            DVector::from_iterator(self.lin.len(), self.lin.iter().map(|c| c.slack(x))),
            self.lmi.iter().map(|l| l.value(x)).collect(),
        )
    }

    fn data_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(&(&self.a * x - &self.b)) * (2.0 / self.j0)
    }

    /// `G^T z`: minus the constraint gradients weighted by the multipliers.
    fn dual_action(&self, z: &Dual) -> DVector<f64> {
        let mut g = DVector::zeros(self.a.ncols());
        for (c, &zi) in self.lin.iter().zip(z.lin.iter()) {
            for &(i, ci) in &c.coef {
                g[i] -= ci * zi;
            }
        }
        for (l, zk) in self.lmi.iter().zip(&z.lmi) {
            for (i, f) in &l.terms {
                g[*i] -= (f * zk).trace();
            }
        }
        g
    }

    fn tie_break(&self, x: &DVector<f64>, weight: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.len();
        match &self.null_q {
            Some(q) => (q * q.tr_mul(&(x - &self.center)) * weight, q * q.transpose() * weight),
            None => (DVector::zeros(n), DMatrix::zeros(n, n)),
        }
    }

    fn scaling(s: &[Matrix4<f64>], z: &[Matrix4<f64>]) -> Option<Scaling> {
        let mut out = Scaling {
            r: Vec::new(),
            r_inv: Vec::new(),
            w_inv: Vec::new(),
            lambda: Vec::new(),
        };
        for (sk, zk) in s.iter().zip(z) {
            let ls = sk.cholesky()?.l();
            let lz = zk.cholesky()?.l();
            let svd = (lz.transpose() * ls).svd(true, true);
            let v = svd.v_t?.transpose();
            let lam = svd.singular_values;
            if !(lam.min() > 0.0) {
                return None;
            }
            let r = ls * v * Matrix4::from_diagonal(&lam.map(|l| 1.0 / l.sqrt()));
            let r_inv = Matrix4::from_diagonal(&lam.map(f64::sqrt)) * v.transpose() * ls.try_inverse()?;
            out.w_inv.push(r_inv.transpose() * r_inv);
            out.r.push(r);
            out.r_inv.push(r_inv);
            out.lambda.push(lam);
        }
        Some(out)
    }

    /// Lifts a scaled complementarity right-hand side `rhs` to the unscaled
    /// residual `r_c` of `dS + W dZ W = r_c`.
    fn lift(sc: &Scaling, k: usize, rhs: &Matrix4<f64>) -> Matrix4<f64> {
        let lam = &sc.lambda[k];
        let rt = Matrix4::from_fn(|i, j| 2.0 * rhs[(i, j)] / (lam[i] + lam[j]));
        symmetrize(&(sc.r[k] * rt * sc.r[k].transpose()))
    }

    /// Solves the reduced Newton system for the given complementarity
    /// residuals and recovers the full step.
    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        schur: &Factored,
        sc: &Scaling,
        s_lin: &DVector<f64>,
        z: &Dual,
        r_d: &DVector<f64>,
        rc_lin: &DVector<f64>,
        rc_lmi: &[Matrix4<f64>],
    ) -> Step {
        let mut rhs = -r_d;
        let ratio = z.lin.component_div(s_lin);
        for (i, c) in self.lin.iter().enumerate() {
            for &(j, cj) in &c.coef {
                rhs[j] += ratio[i] * rc_lin[i] * cj;
            }
        }
        for (k, l) in self.lmi.iter().enumerate() {
            let u = sc.w_inv[k] * rc_lmi[k] * sc.w_inv[k];
            for (i, f) in &l.terms {
                rhs[*i] += (f * u).trace();
            }
        }
        let dx = schur.solve(&rhs);
        let ds_lin = DVector::from_iterator(self.lin.len(), self.lin.iter().map(|c| c.dot(&dx)));
        let dz_lin = ratio.component_mul(&(rc_lin - &ds_lin));
        let ds_lmi: Vec<Matrix4<f64>> = self.lmi.iter().map(|l| l.delta(&dx)).collect();
        let dz_lmi = (0..self.lmi.len())
            .map(|k| symmetrize(&(sc.w_inv[k] * (rc_lmi[k] - ds_lmi[k]) * sc.w_inv[k])))
            .collect();
        Step {
            x: dx,
            s_lin: ds_lin,
            z_lin: dz_lin,
            s_lmi: ds_lmi,
            z_lmi: dz_lmi,
        }
    }

    fn max_step(s_lin: &DVector<f64>, s_lmi: &[Matrix4<f64>], z: &Dual, d: &Step) -> f64 {
        let mut a = orthant_step(s_lin, &d.s_lin, 1.0 / f64::EPSILON);
        a = orthant_step(&z.lin, &d.z_lin, a);
        for k in 0..s_lmi.len() {
            a = cone_step(&s_lmi[k], &d.s_lmi[k], a);
            a = cone_step(&z.lmi[k], &d.z_lmi[k], a);
        }
        a
    }

    fn least_squares_step(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.a.ncols();
        let range = match &self.null_q {
            Some(q) => identifiable_basis(q, n),
            None => DMatrix::identity(n, n),
        };
        let ar = &self.a * &range;
        let tol = f64::EPSILON * (ar.nrows().max(ar.ncols()) as f64);
        let svd = ar.svd(true, true);
        let tol = tol * svd.singular_values.max();
        let z = svd.solve(&(&self.b - &self.a * x), tol).ok()?;
        Some(range * z)
    }

    /// Primal-dual interior point with Nesterov-Todd scaling and Mehrotra's
    /// predictor-corrector, started from a strictly feasible `x0`. Returns
    /// the primal and dual iterates, the iteration count, the relative
    /// stationarity residual and the complementarity gap.
    fn interior(&self, x0: DVector<f64>) -> Result<(DVector<f64>, Dual, usize, f64, f64)> {
        if !self.strictly_feasible(&x0) {
            return Err(Error::Infeasible("starting point is not strictly feasible".into()));
        }
        let m = self.cone_degree();
        let mut x = x0;
        let (s_lin, s_lmi) = self.slacks(&x);
        let mut z = Dual {
            lin: s_lin.map(|s| 1.0 / s),
            lmi: s_lmi.iter().map(|s| s.try_inverse().map_or_else(Matrix4::identity, |v| symmetrize(&v))).collect(),
        };
        let mut iterations = 0;
        let mut best: Option<(f64, DVector<f64>, Dual, f64, f64)> = None;
        let failure = loop {
            let (s_lin, s_lmi) = self.slacks(&x);
            let gap = s_lin.dot(&z.lin) + s_lmi.iter().zip(&z.lmi).map(|(s, z)| (s * z).trace()).sum::<f64>();
            let mu = gap / m;
            let g_data = self.data_gradient(&x);
            let (g_tie, h_tie) = self.tie_break(&x, 2.0 * self.tie_weight);
            let r_d = &g_data + g_tie + self.dual_action(&z);
            let kkt = r_d.amax() / (1.0 + g_data.amax());
            let score = (kkt / KKT_TOL).max(gap / GAP_TOL);
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, x.clone(), z.clone(), kkt, gap));
            }
            if score <= 1.0 || (self.lin.is_empty() && self.lmi.is_empty()) {
                break None;
            }
            if iterations >= MAX_ITERATIONS {
                break Some("iteration limit");
            }
            iterations += 1;
            let Some(sc) = Self::scaling(&s_lmi, &z.lmi) else {
                break Some("iterate reached the cone boundary");
            };
            // Reduced system `P + G^T W^-1 G`.
            let mut h = &self.h_data + h_tie;
            let ratio = z.lin.component_div(&s_lin);
            for (i, c) in self.lin.iter().enumerate() {
                for &(p, cp) in &c.coef {
                    for &(q, cq) in &c.coef {
                        h[(p, q)] += ratio[i] * cp * cq;
                    }
                }
            }
            for (k, l) in self.lmi.iter().enumerate() {
                let mf: Vec<Matrix4<f64>> = l.terms.iter().map(|(_, f)| sc.w_inv[k] * f).collect();
                for a in 0..mf.len() {
                    for b in 0..=a {
                        let v = (mf[a] * mf[b]).trace();
                        let (i, j) = (l.terms[a].0, l.terms[b].0);
                        h[(i, j)] += v;
                        if a != b {
                            h[(j, i)] += v;
                        }
                    }
                }
            }
            let Ok(schur) = Factored::new(&h, self.frame.as_ref()) else {
                break Some("singular Newton system");
            };

            // Predictor.
            let rc_lin = -&s_lin;
            let rc_lmi: Vec<Matrix4<f64>> = s_lmi.iter().map(|s| -s).collect();
            let aff = self.direction(&schur, &sc, &s_lin, &z, &r_d, &rc_lin, &rc_lmi);
            let alpha = Self::max_step(&s_lin, &s_lmi, &z, &aff).min(1.0);
            let gap_aff = (&s_lin + &aff.s_lin * alpha).dot(&(&z.lin + &aff.z_lin * alpha))
                + (0..s_lmi.len())
                    .map(|k| ((s_lmi[k] + aff.s_lmi[k] * alpha) * (z.lmi[k] + aff.z_lmi[k] * alpha)).trace())
                    .sum::<f64>();
            let sigma = (gap_aff.max(0.0) / gap).powi(3).min(1.0);

            // Corrector.
            let target = sigma * mu;
            let rc_lin = DVector::from_fn(s_lin.len(), |i, _| {
                (target - s_lin[i] * z.lin[i] - aff.s_lin[i] * aff.z_lin[i]) / z.lin[i]
            });
            let rc_lmi: Vec<Matrix4<f64>> = (0..s_lmi.len())
                .map(|k| {
                    let ds = sc.r_inv[k] * aff.s_lmi[k] * sc.r_inv[k].transpose();
                    let dz = sc.r[k].transpose() * aff.z_lmi[k] * sc.r[k];
                    let lam2 = Matrix4::from_diagonal(&sc.lambda[k].map(|l| l * l));
                    let rhs = Matrix4::identity() * target - lam2 - symmetrize(&(ds * dz));
                    Self::lift(&sc, k, &rhs)
                })
                .collect();
            let d = self.direction(&schur, &sc, &s_lin, &z, &r_d, &rc_lin, &rc_lmi);
            let alpha = (0.99 * Self::max_step(&s_lin, &s_lmi, &z, &d)).min(1.0);
            let xn = &x + &d.x * alpha;
            if !self.strictly_feasible(&xn) {
                break Some("step left the feasible set");
            }
            x = xn;
            z.lin += &d.z_lin * alpha;
            for (zk, dk) in z.lmi.iter_mut().zip(&d.z_lmi) {
                *zk = symmetrize(&(*zk + dk * alpha));
            }
        };
        // Round-off limits the attainable accuracy; a nearly converged best
        // iterate is accepted when progress stops short of the tolerances.
        let (_, bx, bz, kkt_residual, gap) = best.expect("at least one iterate");
        if let Some(reason) = failure {
            if !(kkt_residual <= ACCEPT_KKT && gap <= ACCEPT_GAP) {
                return Err(Error::NotConverged {
                    iterations,
                    detail: format!("{reason}: stationarity {kkt_residual:.1e}, gap {gap:.1e}"),
                    best: bx.iter().copied().collect(),
                });
            }
        }
        Ok((bx, bz, iterations, kkt_residual, gap))
    }

    /// The unconstrained fit over the identifiable directions, when some
    /// choice of the unidentifiable part makes it strictly feasible, is the
    /// constrained optimum. Weakly excited directions leave the interior
    /// iterate short of it; a second interior pass with the well-conditioned
    /// objective `|R^T (x - x_ls)|^2` re-centres the unidentifiable part so
    /// the exact fit can be taken.
    fn polish(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let target = x + self.least_squares_step(x)?;
        let accept = |xn: DVector<f64>| (self.strictly_feasible(&xn) && self.data(&xn) <= self.data(x)).then_some(xn);
        if let Some(xn) = accept(target.clone()) {
            return Some(xn);
        }
        let q = self.null_q.as_ref()?;
        let r = identifiable_basis(q, x.len());
        let mut sub = Program::new(r.transpose(), r.tr_mul(&target), self.center.clone(), Some(q.clone()), self.lin.clone(), self.lmi.clone()).ok()?;
        // A much weaker tie-break keeps the iterates on the central path
        // towards the relative interior of the optimal set, not its boundary.
        sub.tie_weight = 1e-12;
        // Any interior iterate will do; the result is checked below.
        let y = match sub.interior(x.clone()) {
            Ok((y, ..)) => y,
            Err(Error::NotConverged { best, .. }) => DVector::from_vec(best),
            Err(_) => return None,
        };
        accept(&y + &r * r.tr_mul(&(&target - &y)))
    }

    /// Among the fits sharing `x`'s identifiable coordinates, the one
    /// closest to the centre along the unidentifiable directions. The data
    /// term is constant on that set, so this settles ties exactly instead of
    /// through a weighted penalty, which the interior iterates resolve only
    /// to the square root of their gap.
    fn settle_ties(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let q = self.null_q.as_ref()?;
        let nq = q.ncols();
        let fixed = x - q * q.tr_mul(x);
        let mut lin = Vec::new();
        for c in &self.lin {
            let cq = DVector::from_fn(nq, |j, _| c.coef.iter().map(|&(i, v)| v * q[(i, j)]).sum());
            let scale = c.coef.iter().map(|&(_, v)| v.abs()).fold(0.0, f64::max);
            if cq.amax() > 1e-12 * scale {
                lin.push(LinCon {
                    coef: cq.iter().enumerate().map(|(j, &v)| (j, v)).collect(),
                    rhs: c.rhs - c.dot(&fixed),
                    name: c.name.clone(),
                });
            }
        }
        let mut lmi = Vec::new();
        for l in &self.lmi {
            let terms: Vec<(usize, Matrix4<f64>)> = (0..nq)
                .map(|j| (j, l.terms.iter().fold(Matrix4::zeros(), |acc, (i, f)| acc + f * q[(*i, j)])))
                .filter(|(_, f)| f.amax() > 1e-12)
                .collect();
            if !terms.is_empty() {
                lmi.push(LmiCon {
                    offset: l.value(&fixed),
                    terms,
                    name: l.name.clone(),
                });
            }
        }
        let y0 = q.tr_mul(x);
        let mut sub = Program::new(DMatrix::identity(nq, nq), q.tr_mul(&self.center), y0.clone(), None, lin, lmi).ok()?;
        sub.tie_weight = 0.0;
        // Any interior iterate will do; the result is checked below.
        let y = match sub.interior(y0) {
            Ok((y, ..)) => y,
            Err(Error::NotConverged { best, .. }) => DVector::from_vec(best),
            Err(_) => return None,
        };
        let xn = fixed + q * y;
        // The optimum may lie on constraints that mix both kinds of
        // direction, where recombining leaves round-off sized violations.
        let ok = self.lin.iter().all(|c| c.slack(&xn) >= -SETTLE_TOL) && self.lmi.iter().all(|l| l.value(&xn).symmetric_eigenvalues().min() >= -SETTLE_TOL);
        ok.then_some(xn)
    }

    fn solve(&self, x0: DVector<f64>) -> Result<Solution> {
        let (mut x, z, iterations, mut kkt_residual, gap) = self.interior(x0)?;
        if let Some(xn) = self.polish(&x) {
            x = xn;
            let g_data = self.data_gradient(&x);
            kkt_residual = (&g_data + self.dual_action(&z)).amax() / (1.0 + g_data.amax());
        }
        if let Some(xn) = self.settle_ties(&x) {
            x = xn;
        }
        let (s_lin, s_lmi) = self.slacks(&x);
        let active = self
            .lin
            .iter()
            .enumerate()
            .filter(|&(i, _)| z.lin[i] > s_lin[i])
            .map(|(_, c)| c.name.clone())
            .chain(
                self.lmi
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| z.lmi[k].symmetric_eigenvalues().max() > s_lmi[k].symmetric_eigenvalues().min())
                    .map(|(_, l)| l.name.clone()),
            )
            .collect();
        Ok(Solution {
            x,
            iterations,
            kkt_residual,
            gap,
            active,
        })
    }
}

/// Orthonormal basis of the complement of `null` in `R^n`.
fn identifiable_basis(null: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if null.ncols() == 0 {
        return DMatrix::identity(n, n);
    }
    let q = nalgebra::QR::new(null.clone()).q();
    let proj = DMatrix::identity(n, n) - &q * q.transpose();
    let eig = proj.symmetric_eigen();
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

/// Cholesky factor of a symmetric positive definite system, expressed in an
/// optional orthonormal frame, with Jacobi scaling and a small
/// regularization fallback.
struct Factored {
    frame: Option<DMatrix<f64>>,
    scale: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Factored {
    fn new(h: &DMatrix<f64>, frame: Option<&DMatrix<f64>>) -> Result<Self> {
        let hf = match frame {
            Some(t) => t.tr_mul(h) * t,
            None => h.clone(),
        };
        let n = hf.nrows();
        let scale = DVector::from_fn(n, |i, _| {
            let d = hf[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        });
        let hs = DMatrix::from_fn(n, n, |i, j| hf[(i, j)] * scale[i] * scale[j]);
        let mut reg = 0.0;
        for _ in 0..12 {
            let mut m = hs.clone();
            for i in 0..n {
                m[(i, i)] += reg;
            }
            if let Some(chol) = m.cholesky() {
                return Ok(Factored {
                    frame: frame.cloned(),
                    scale,
                    chol,
                });
            }
            reg = if reg == 0.0 { 1e-14 } else { reg * 100.0 };
        }
        Err(Error::DegenerateModel("Newton system is not positive definite".into()))
    }

    fn solve(&self, g: &DVector<f64>) -> DVector<f64> {
        let gf = match &self.frame {
            Some(t) => t.tr_mul(g),
            None => g.clone(),
        };
        let y = self.chol.solve(&gf.component_mul(&self.scale)).component_mul(&self.scale);
        match &self.frame {
            Some(t) => t * y,
            None => y,
        }
    }
}

/// Constraint rows over a decision vector whose entry `pos[i]` holds full
/// parameter `i`.
fn build_constraints(
    c: &ConsistencyConstraints,
    pos: &dyn Fn(usize) -> Option<usize>,
    with_elements: bool,
) -> (Vec<LinCon>, Vec<LmiCon>) {
    let mut lin = Vec::new();
    let mut lmi = Vec::new();
    let mut bound = |i: Option<usize>, lo: f64, hi: f64, name: String| {
        if let Some(i) = i {
            lin.push(LinCon {
                coef: vec![(i, 1.0)],
                rhs: lo,
                name: format!("{name} lower"),
            });
            lin.push(LinCon {
                coef: vec![(i, -1.0)],
                rhs: -hi,
                name: format!("{name} upper"),
            });
        }
    };
    for l in &c.links {
        let base = l.link * PARAMS_PER_LINK;
        bound(pos(base + slot::MASS), l.mass[0], l.mass[1], format!("L{} mass", l.id));
    }
    if with_elements {
        for e in &c.elements {
            let base = e.link * PARAMS_PER_LINK;
            for (s, b, name) in [(slot::FV, e.fv, "Fv"), (slot::FC, e.fc, "Fc"), (slot::IM, e.im, "Im"), (slot::KS, e.ks, "Ks")] {
                if let Some([lo, hi]) = b {
                    bound(pos(base + s), lo, hi, format!("A{} {name}", e.id));
                }
            }
        }
    }
    for l in &c.links {
        let base = l.link * PARAMS_PER_LINK;
        let (Some(m), true) = (pos(base + slot::MASS), true) else {
            continue;
        };
        for (ax, axis) in ["x", "y", "z"].iter().enumerate() {
            let Some(h) = pos(base + slot::HX + ax) else {
                continue;
            };
            lin.push(LinCon {
                coef: vec![(h, 1.0), (m, -l.com_min[ax])],
                rhs: 0.0,
                name: format!("L{} COM {axis} lower", l.id),
            });
            lin.push(LinCon {
                coef: vec![(h, -1.0), (m, l.com_max[ax])],
                rhs: 0.0,
                name: format!("L{} COM {axis} upper", l.id),
            });
        }
        if c.mode == ConstraintMode::Full {
            let terms: Vec<(usize, Matrix4<f64>)> = (0..LMI_DIM).filter_map(|j| pos(base + j)).zip(lmi_basis()).collect();
            if terms.len() == LMI_DIM {
                lmi.push(LmiCon {
                    offset: Matrix4::zeros(),
                    terms,
                    name: format!("L{} pseudo-inertia", l.id),
                });
            }
        }
    }
    (lin, lmi)
}

#[derive(Debug, Clone)]
pub struct IdentReport {
    pub mode: ConstraintMode,
    /// `sum_i |omega_i (W_i theta - b_i)|^2`.
    pub objective: f64,
    pub iterations: usize,
    /// Relative stationarity residual of the KKT system.
    pub kkt_residual: f64,
    /// Final complementarity gap, relative to `|Omega b|^2`.
    pub gap: f64,
    /// Per-motor NRMSE on the fitted data (%).
    pub nrmse: Vec<f64>,
    pub active_constraints: Vec<String>,
    pub audit: Audit,
    pub warnings: Vec<String>,
}

impl IdentReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("mode = \"{}\"\n", match self.mode {
            ConstraintMode::Unconstrained => "unconstrained",
            ConstraintMode::GravityOnly => "gravity-only",
            ConstraintMode::Full => "full",
        }));
        s.push_str(&format!("objective = {:e}\n", self.objective));
        s.push_str(&format!("iterations = {}\n", self.iterations));
        s.push_str(&format!("kkt_residual = {:e}\n", self.kkt_residual));
        s.push_str(&format!("gap = {:e}\n", self.gap));
        let nr: Vec<String> = self.nrmse.iter().map(|v| format!("{v:.4}")).collect();
        s.push_str(&format!("nrmse_percent = [{}]\n", nr.join(", ")));
        let act: Vec<String> = self.active_constraints.iter().map(|a| format!("\"{a}\"")).collect();
        s.push_str(&format!("active_constraints = [{}]\n", act.join(", ")));
        let viol: Vec<String> = self.audit.violations(FEASIBILITY_TOL).iter().map(|a| format!("\"{a}\"")).collect();
        s.push_str(&format!("violations = [{}]\n", viol.join(", ")));
        if !self.warnings.is_empty() {
            let w: Vec<String> = self.warnings.iter().map(|a| format!("{a:?}")).collect();
            s.push_str(&format!("warnings = [{}]\n", w.join(", ")));
        }
        s
    }
}

fn per_motor_nrmse(problem: &IdentificationProblem, pred: &DVector<f64>) -> Vec<f64> {
    (0..problem.dof)
        .map(|i| nrmse(&problem.motor_series(&problem.b, i), &problem.motor_series(pred, i)).unwrap_or(f64::NAN))
        .collect()
}

fn expand(problem: &IdentificationProblem, n_full: usize, x: &DVector<f64>) -> DynamicParameters {
    let mut v = DVector::zeros(n_full);
    for (c, &i) in problem.active().iter().enumerate() {
        v[i] = x[c];
    }
    DynamicParameters { values: v }
}

/// Weighted least squares under the declared constraints. Unidentifiable
/// directions are pinned towards the constraint centre.
pub fn solve(
    problem: &IdentificationProblem,
    constraints: &ConsistencyConstraints,
) -> Result<(DynamicParameters, IdentReport)> {
    constraints.validate()?;
    let n_full = constraints
        .links
        .iter()
        .map(|l| l.link)
        .chain(constraints.elements.iter().map(|e| e.link))
        .chain(problem.active().iter().map(|&i| i / PARAMS_PER_LINK))
        .max()
        .map_or(0, |k| (k + 1) * PARAMS_PER_LINK);
    let center_full = constraints.center(n_full / PARAMS_PER_LINK);
    let center = problem.to_active(&center_full.values);
    let (w, b) = problem.weighted();
    let mut warnings = problem.warnings.clone();

    let (x, iterations, kkt_residual, gap, active) = if constraints.mode == ConstraintMode::Unconstrained {
        // Least squares over the identifiable directions only, so the
        // unidentifiable part stays exactly at the centre.
        let range = identifiable_basis(&problem.base.null_space(), w.ncols());
        let wr = &w * &range;
        let svd = wr.svd(true, true);
        let tol = svd.singular_values.max() * f64::EPSILON * (w.nrows().max(range.ncols()) as f64);
        let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
        if rank < range.ncols() {
            warnings.push(format!("data rank {rank} of {} base parameters", range.ncols()));
        }
        let z = svd.solve(&(&b - &w * &center), tol).map_err(|e| Error::DegenerateModel(e.to_string()))?;
        let dx = range * z;
        (center + dx, 0, 0.0, 0.0, Vec::new())
    } else {
        let pos_map: Vec<Option<usize>> = {
            let mut m = vec![None; n_full];
            for (c, &i) in problem.active().iter().enumerate() {
                m[i] = Some(c);
            }
            m
        };
        let pos = |i: usize| pos_map.get(i).copied().flatten();
        let (lin, lmi) = build_constraints(constraints, &pos, true);
        let program = Program::new(w, b, center.clone(), Some(problem.base.null_space()), lin, lmi)?;
        let sol = program.solve(center)?;
        (sol.x, sol.iterations, sol.kkt_residual, sol.gap, sol.active)
    };

    let theta = expand(problem, n_full, &x);
    let pred = &problem.w * &x;
    let (wm, bm) = problem.weighted();
    let objective = (&wm * &x - &bm).norm_squared();
    let report = IdentReport {
        mode: constraints.mode,
        objective,
        iterations,
        kkt_residual,
        gap,
        nrmse: per_motor_nrmse(problem, &pred),
        active_constraints: active,
        audit: audit(&theta, constraints),
        warnings,
    };
    Ok((theta, report))
}

/// Gravity-only model of the first three joints: first moments and masses
/// of the link primarily driven by each of joints 1 to 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticsModel {
    pub links: Vec<String>,
    /// Per link `[hx, hy, hz, m]`.
    pub values: Vec<[f64; 4]>,
}

pub const STATICS_JOINTS: usize = 3;

/// Links carrying the statics parameters, one per leading joint.
pub fn statics_links(model: &RobotModel) -> Result<Vec<usize>> {
    (0..STATICS_JOINTS.min(model.dof()))
        .map(|j| {
            (0..model.n_kinematic())
                .find(|&k| {
                    let li = model.kinematic[k];
                    model.links[li].flags.link_inertia && matches!(model.frame(k).driver, Some((b, c)) if b == j && c == 1.0)
                })
                .map(|k| model.kinematic[k])
                .ok_or_else(|| Error::Structure(format!("no inertial link is driven by joint {}", j + 1)))
        })
        .collect()
}

fn statics_columns(links: &[usize]) -> Vec<usize> {
    links
        .iter()
        .flat_map(|&l| {
            let b = l * PARAMS_PER_LINK;
            [b + slot::HX, b + slot::HX + 1, b + slot::HX + 2, b + slot::MASS]
        })
        .collect()
}

/// `Y_rg(q)`: rows are the leading joints, columns the statics parameters.
pub fn statics_regressor(model: &RobotModel, links: &[usize], q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let y = dynamics::regressor(model, &JointState::at_rest(q.clone()))?;
    let cols = statics_columns(links);
    let rows = links.len();
    Ok(DMatrix::from_fn(rows, cols.len(), |r, c| y[(r, cols[c])]))
}

impl StaticsModel {
    fn vector(&self) -> DVector<f64> {
        DVector::from_iterator(4 * self.values.len(), self.values.iter().flatten().copied())
    }

    /// Predicted holding torques of the leading joints.
    pub fn predict(&self, model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
        let links: Vec<usize> = self
            .links
            .iter()
            .map(|id| model.link_index(id).ok_or_else(|| Error::Config(format!("unknown link `{id}`"))))
            .collect::<Result<_>>()?;
        Ok(statics_regressor(model, &links, q)? * self.vector())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("statics model serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: StaticsModel = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if m.links.len() != m.values.len() {
            return Err(Error::Config("one value row per statics link".into()));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone)]
pub struct StaticsReport {
    pub samples: usize,
    pub rank: usize,
    /// Rank reached by generic poses around the samples.
    pub structural_rank: usize,
    pub n_params: usize,
    pub rms_residual: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub active_constraints: Vec<String>,
    pub warnings: Vec<String>,
}

impl StaticsReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "samples = {}\nrank = {}\nstructural_rank = {}\nparameters = {}\nrms_residual = {:e}\nkkt_residual = {:e}\niterations = {}\n",
            self.samples, self.rank, self.structural_rank, self.n_params, self.rms_residual, self.kkt_residual, self.iterations
        );
        let act: Vec<String> = self.active_constraints.iter().map(|a| format!("\"{a}\"")).collect();
        s.push_str(&format!("active_constraints = [{}]\n", act.join(", ")));
        let w: Vec<String> = self.warnings.iter().map(|a| format!("{a:?}")).collect();
        s.push_str(&format!("warnings = [{}]\n", w.join(", ")));
        s
    }
}

/// Normal-matrix eigenvalues below this fraction of the largest count as zero.
const RANK_RATIO: f64 = 1e-12;

/// Rank of the statics regressor over generic poses spread around the mean
/// sample, the most any sample set can reach.
fn structural_statics_rank(model: &RobotModel, links: &[usize], samples: &[StaticSample]) -> Result<usize> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mean = samples.iter().fold(DVector::zeros(model.dof()), |acc, s| acc + &s.q) / samples.len() as f64;
    let n = 4 * links.len();
    let mut ata = DMatrix::zeros(n, n);
    for _ in 0..8 * n {
        let mut q = mean.clone();
        for j in 0..links.len() {
            let spread = match model.joint_kind(j) {
                crate::kinematics::JointKind::Prismatic => 0.05,
                _ => 1.0,
            };
            q[j] += rng.random_range(-spread..spread);
        }
        let y = statics_regressor(model, links, &q)?;
        ata += y.tr_mul(&y);
    }
    let e = ata.symmetric_eigenvalues();
    Ok(e.iter().filter(|v| **v > RANK_RATIO * e.max()).count())
}

/// Bound-constrained least squares for the statics-only model: masses and
/// COM boxes of the three leading links from `constraints`.
pub fn fit_statics(
    model: &RobotModel,
    samples: &[StaticSample],
    constraints: &ConsistencyConstraints,
) -> Result<(StaticsModel, StaticsReport)> {
    constraints.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientSamples("no static samples".into()));
    }
    let links = statics_links(model)?;
    let cols = statics_columns(&links);
    let nj = links.len();
    let mut warnings = Vec::new();
    if samples.len() < MIN_STATIC_SAMPLES {
        warnings.push(format!(
            "only {} static samples (at least {MIN_STATIC_SAMPLES} recommended); coverage is poor",
            samples.len()
        ));
    }
    let mut a = DMatrix::zeros(samples.len() * nj, cols.len());
    let mut b = DVector::zeros(samples.len() * nj);
    for (s, smp) in samples.iter().enumerate() {
        if smp.q.len() != model.dof() || smp.tau.len() != model.dof() {
            return Err(Error::Dimension {
                context: "static sample",
                expected: model.dof(),
                got: smp.q.len().min(smp.tau.len()),
            });
        }
        a.view_mut((s * nj, 0), (nj, cols.len())).copy_from(&statics_regressor(model, &links, &smp.q)?);
        for r in 0..nj {
            b[s * nj + r] = smp.tau[r];
        }
    }

    let ata = a.tr_mul(&a);
    let eig = ata.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let rank = eig.eigenvalues.iter().filter(|v| **v > RANK_RATIO * lmax).count();
    let structural = structural_statics_rank(model, &links, samples)?;
    if rank < structural {
        warnings.push(format!(
            "statics regressor rank {rank} below the structural rank {structural}; unidentifiable directions pinned to the centre"
        ));
    }
    let null: Vec<DVector<f64>> = (0..cols.len())
        .filter(|&i| !(eig.eigenvalues[i] > RANK_RATIO * lmax))
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    let null_basis = (!null.is_empty()).then(|| DMatrix::from_columns(&null));

    let bounds: Vec<LinkBounds> = links
        .iter()
        .map(|&l| {
            constraints
                .links
                .iter()
                .find(|b| b.link == l)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no bounds for statics link `{}`", model.links[l].id)))
        })
        .collect::<Result<_>>()?;
    let reduced = ConsistencyConstraints {
        mode: ConstraintMode::GravityOnly,
        links: bounds,
        elements: Vec::new(),
    };
    let pos = |i: usize| cols.iter().position(|&c| c == i);
    let (lin, lmi) = build_constraints(&reduced, &pos, false);
    let center_full = reduced.center(model.n_links());
    let center = DVector::from_iterator(cols.len(), cols.iter().map(|&c| center_full.values[c]));
    let program = Program::new(a.clone(), b.clone(), center.clone(), null_basis, lin, lmi)?;
    let sol = program.solve(center)?;

    let rms_residual = ((&a * &sol.x - &b).norm_squared() / b.len() as f64).sqrt();
    let model_out = StaticsModel {
        links: links.iter().map(|&l| model.links[l].id.clone()).collect(),
        values: (0..nj).map(|k| [sol.x[4 * k], sol.x[4 * k + 1], sol.x[4 * k + 2], sol.x[4 * k + 3]]).collect(),
    };
    let report = StaticsReport {
        samples: samples.len(),
        rank,
        structural_rank: structural,
        n_params: cols.len(),
        rms_residual,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        active_constraints: sol.active,
        warnings,
    };
    Ok((model_out, report))
}
