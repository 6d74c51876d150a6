//! Minimal base-parameter set via rank-revealing QR of a stacked regressor.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, DynamicParameters, JointState};
use crate::error::{Error, Result};
use crate::excitation::JointLimits;
use crate::kinematics::RobotModel;
use crate::linalg::pivoted_qr;

pub const RANK_TOLERANCE: f64 = 1e-8;

/// Relative column norm below which a column is treated as numerically zero.
pub const NEGLIGIBLE_COLUMN: f64 = 1e-12;

/// Accelerations for random states are drawn within this multiple of the
/// velocity limit (1/s).
pub const ACCEL_PER_VELOCITY: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BaseParameterization {
    /// Full-vector indices of the structurally nonzero parameters.
    pub active: Vec<usize>,
    /// Pivot order over `active` positions; the first `n_b` are independent.
    pub permutation: Vec<usize>,
    pub n_b: usize,
    /// `n_b x n_d`, with `Y_d = Y_b B_d`.
    pub b_d: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct BaseFile {
    n_b: usize,
    active: Vec<usize>,
    permutation: Vec<usize>,
    b_d: Vec<Vec<f64>>,
}

impl BaseParameterization {
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn n_d(&self) -> usize {
        self.active.len() - self.n_b
    }

    /// Full-vector indices of the independent parameters, in pivot order.
    pub fn base_indices(&self) -> Vec<usize> {
        self.permutation[..self.n_b].iter().map(|&i| self.active[i]).collect()
    }

    pub fn dependent_indices(&self) -> Vec<usize> {
        self.permutation[self.n_b..].iter().map(|&i| self.active[i]).collect()
    }

    /// `beta = theta_b + B_d theta_d`.
    pub fn beta(&self, theta: &DynamicParameters) -> DVector<f64> {
        self.beta_from_full(&theta.values)
    }

    pub fn beta_from_full(&self, theta: &DVector<f64>) -> DVector<f64> {
        let tb = DVector::from_iterator(self.n_b, self.base_indices().into_iter().map(|i| theta[i]));
        let td = DVector::from_iterator(self.n_d(), self.dependent_indices().into_iter().map(|i| theta[i]));
        tb + &self.b_d * td
    }

    /// Same as [`beta_from_full`](Self::beta_from_full) for a vector over active positions.
    pub fn beta_from_active(&self, theta_a: &DVector<f64>) -> DVector<f64> {
        let tb = DVector::from_iterator(self.n_b, self.permutation[..self.n_b].iter().map(|&i| theta_a[i]));
        let td = DVector::from_iterator(self.n_d(), self.permutation[self.n_b..].iter().map(|&i| theta_a[i]));
        tb + &self.b_d * td
    }

    /// Selects the independent columns out of a full `dof x p` regressor.
    pub fn reduce(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        y.select_columns(self.base_indices().iter())
    }

    /// Basis (over active positions) of the directions that leave every
    /// regressor prediction unchanged: columns of `P [-B_d; I]`.
    pub fn null_space(&self) -> DMatrix<f64> {
        let na = self.n_active();
        let nd = self.n_d();
        let mut n = DMatrix::zeros(na, nd);
        for j in 0..nd {
            for i in 0..self.n_b {
                n[(self.permutation[i], j)] = -self.b_d[(i, j)];
            }
            n[(self.permutation[self.n_b + j], j)] = 1.0;
        }
        n
    }

    pub fn names(&self, model: &RobotModel) -> Vec<String> {
        let all = DynamicParameters::names(model);
        self.base_indices().into_iter().map(|i| all[i].clone()).collect()
    }

    pub fn to_toml(&self) -> String {
        let file = BaseFile {
            n_b: self.n_b,
            active: self.active.clone(),
            permutation: self.permutation.clone(),
            b_d: self.b_d.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        toml::to_string(&file).expect("base parameterization serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: BaseFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let na = f.active.len();
        if f.n_b > na || f.permutation.len() != na {
            return Err(Error::Config("inconsistent base parameterization sizes".into()));
        }
        let mut seen = vec![false; na];
        for &p in &f.permutation {
            if p >= na || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config("permutation is not a bijection".into()));
            }
        }
        let nd = na - f.n_b;
        if f.b_d.len() != f.n_b || f.b_d.iter().any(|r| r.len() != nd) {
            return Err(Error::Config(format!("b_d must be {} x {nd}", f.n_b)));
        }
        let b_d = DMatrix::from_fn(f.n_b, nd, |i, j| f.b_d[i][j]);
        Ok(BaseParameterization {
            active: f.active,
            permutation: f.permutation,
            n_b: f.n_b,
            b_d,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Draws a state uniformly within position/velocity limits.
pub fn random_state(limits: &JointLimits, rng: &mut impl Rng) -> JointState {
    let n = limits.dof();
    let mut q = DVector::zeros(n);
    let mut qd = DVector::zeros(n);
    let mut qdd = DVector::zeros(n);
    for j in 0..n {
        q[j] = rng.random_range(limits.q_min[j]..limits.q_max[j]);
        qd[j] = rng.random_range(limits.qd_min[j]..limits.qd_max[j]);
        let a = ACCEL_PER_VELOCITY * limits.qd_max[j].max(-limits.qd_min[j]);
        qdd[j] = rng.random_range(-a..a);
    }
    JointState::new(q, qd, qdd)
}

/// Stacks full regressors at `sample_count` seeded random states, restricted
/// to the active columns.
pub fn stack_random(
    model: &RobotModel,
    limits: &JointLimits,
    sample_count: usize,
    seed: u64,
    active: &[usize],
) -> Result<DMatrix<f64>> {
    limits.check_dof(model.dof())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dof = model.dof();
    let mut w = DMatrix::zeros(sample_count * dof, active.len());
    for s in 0..sample_count {
        let st = random_state(limits, &mut rng);
        let y = dynamics::regressor(model, &st)?;
        for (c, &a) in active.iter().enumerate() {
            for r in 0..dof {
                w[(s * dof + r, c)] = y[(r, a)];
            }
        }
    }
    Ok(w)
}

pub fn compute_base(
    model: &RobotModel,
    limits: &JointLimits,
    sample_count: usize,
    seed: u64,
) -> Result<BaseParameterization> {
    let p = model.n_links() * dynamics::PARAMS_PER_LINK;
    if sample_count * model.dof() < p {
        return Err(Error::RankUnderdetermined {
            rows: sample_count * model.dof(),
            cols: p,
        });
    }
    let active = dynamics::active_indices(model);
    let w = stack_random(model, limits, sample_count, seed, &active)?;
    Ok(from_matrix(&w, active, RANK_TOLERANCE))
}

/// Base decomposition of an explicit stacked matrix whose columns correspond
/// to `active`. Columns are equilibrated to unit norm before pivoting so the
/// rank threshold compares directions rather than units.
pub fn from_matrix(w: &DMatrix<f64>, active: Vec<usize>, tol: f64) -> BaseParameterization {
    let na = w.ncols();
    assert_eq!(na, active.len(), "one active index per column");
    let norms: Vec<f64> = (0..na).map(|c| w.column(c).norm()).collect();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    // Columns at roundoff level carry no information; leaving them unscaled
    // keeps them at the bottom of the pivot order instead of inflating noise.
    let scale: Vec<f64> = norms
        .iter()
        .map(|&n| if n > NEGLIGIBLE_COLUMN * max_norm { n } else { 1.0 })
        .collect();
    let mut ws = w.clone();
    for (c, s) in scale.iter().enumerate() {
        ws.column_mut(c).scale_mut(1.0 / s);
    }
    let qr = pivoted_qr(&ws);
    let n_b = qr.rank(tol);
    let nd = na - n_b;
    let r11 = qr.r.view((0, 0), (n_b, n_b)).into_owned();
    let r12 = qr.r.view((0, n_b), (n_b, nd)).into_owned();
    let mut b = r11
        .solve_upper_triangular(&r12)
        .unwrap_or_else(|| DMatrix::zeros(n_b, nd));
    for i in 0..n_b {
        let si = scale[qr.perm[i]];
        for j in 0..nd {
            b[(i, j)] *= scale[qr.perm[n_b + j]] / si;
        }
    }
    BaseParameterization {
        active,
        permutation: qr.perm,
        n_b,
        b_d: b,
    }
}

/// `Y_b(state)`: the independent columns of the regressor.
pub fn base_regressor(
    model: &RobotModel,
    base: &BaseParameterization,
    state: &JointState,
) -> Result<DMatrix<f64>> {
    Ok(base.reduce(&dynamics::regressor(model, state)?))
}
