//! Synthetic ground truth and simulated measurements: consistent parameter
//! sets, excitation logs along Fourier trajectories and static pose samples.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{self, AdditionalParams, DynamicParameters, JointState, LinkInertialParams};
use crate::error::{Error, Result};
use crate::excitation::{FourierTrajectory, JointLimits};
use crate::kinematics::{JointKind, RobotModel};
use crate::signals::TrajectoryLog;

/// Smallest half-extent assumed for a link body (m).
pub const MIN_HALF_EXTENT: f64 = 0.02;

fn synthetic_mass(id: &str) -> f64 {
    match id {
        "1" => 3.0,
        "2" => 2.0,
        "2''" => 0.5,
        "2''''" => 1.5,
        _ => 1.0,
    }
}

/// Centre of the bounding box of a link's own and child frame origins, and
/// the box half-extents (at least [`MIN_HALF_EXTENT`]).
pub fn link_box(model: &RobotModel, link: usize) -> (Vector3<f64>, Vector3<f64>) {
    let pts = model.link_points(link);
    if pts.is_empty() {
        return (Vector3::zeros(), Vector3::repeat(MIN_HALF_EXTENT));
    }
    let lo = pts.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = pts.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let half = ((hi - lo) * 0.5).map(|v| v.max(MIN_HALF_EXTENT));
    ((lo + hi) * 0.5, half)
}

/// A physically consistent parameter set of plausible magnitude: each
/// inertial link is a uniform box spanning its frame origins, and friction,
/// motor inertia and spring values are typical of cable-driven joints.
pub fn synthetic_parameters(model: &RobotModel) -> DynamicParameters {
    let mut p = DynamicParameters::zeros(model);
    for (k, l) in model.links.iter().enumerate() {
        if l.flags.link_inertia {
            let m = synthetic_mass(&l.id);
            let (c, e) = link_box(model, k);
            let (x2, y2, z2) = (e.x * e.x, e.y * e.y, e.z * e.z);
            let i_com = Matrix3::from_diagonal(&Vector3::new(y2 + z2, x2 + z2, x2 + y2)) * (m / 3.0);
            p.set_link(k, &LinkInertialParams::from_com(m, c, i_com));
        }
        let prismatic = l.frame.as_ref().is_some_and(|f| f.kind == JointKind::Prismatic);
        let mut a = AdditionalParams::default();
        if l.flags.friction {
            (a.fv, a.fc, a.fb) = if prismatic {
                (2.0, 1.0, 0.1)
            } else if l.flags.link_inertia {
                (0.1, 0.15, 0.02)
            } else {
                (0.01, 0.02, 0.002)
            };
        }
        if l.flags.motor_inertia {
            a.im = 5e-3;
        }
        if l.flags.spring {
            a.ks = 0.02;
        }
        p.set_additional(k, &a);
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExciteOptions {
    pub rate: f64,
    pub periods: usize,
    /// Effort noise standard deviation as a fraction of each motor's range.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ExciteOptions {
    fn default() -> Self {
        ExciteOptions {
            rate: crate::excitation::DEFAULT_SAMPLE_RATE_HZ,
            periods: 1,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Records motor efforts along a trajectory via inverse dynamics, with exact
/// positions and velocities and optional Gaussian effort noise.
pub fn excite(
    model: &RobotModel,
    params: &DynamicParameters,
    traj: &FourierTrajectory,
    opts: &ExciteOptions,
) -> Result<TrajectoryLog> {
    if traj.dof() != model.dof() {
        return Err(Error::Dimension {
            context: "trajectory joints",
            expected: model.dof(),
            got: traj.dof(),
        });
    }
    if !(opts.rate > 0.0) || opts.periods == 0 || !(opts.noise >= 0.0) {
        return Err(Error::Precondition("rate, periods and noise must be positive".into()));
    }
    let n = (opts.periods as f64 * traj.period() * opts.rate).round() as usize;
    let dof = model.dof();
    let times: Vec<f64> = (0..n).map(|i| i as f64 / opts.rate).collect();
    let states: Vec<JointState> = times.iter().map(|&t| traj.state(t)).collect();
    let taus = crate::par_map(&states, |s| dynamics::inverse_dynamics(model, params, s));
    let mut q = DMatrix::zeros(n, dof);
    let mut qd = DMatrix::zeros(n, dof);
    let mut tau = DMatrix::zeros(n, dof);
    for (i, (s, t)) in states.iter().zip(taus).enumerate() {
        q.set_row(i, &s.q.transpose());
        qd.set_row(i, &s.qd.transpose());
        tau.set_row(i, &t?.transpose());
    }
    if opts.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for j in 0..dof {
            let c = tau.column(j);
            let sigma = opts.noise * (c.max() - c.min());
            if sigma > 0.0 {
                let d = Normal::new(0.0, sigma).expect("finite sigma");
                for i in 0..n {
                    tau[(i, j)] += d.sample(&mut rng);
                }
            }
        }
    }
    TrajectoryLog::new(times, q, qd, tau)
}

/// One static measurement: motor positions and the holding effort.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSample {
    pub q: DVector<f64>,
    pub tau: DVector<f64>,
}

/// Random static poses: the first three joints span their limits and the
/// wrist rests at the centre of its range.
pub fn random_poses(limits: &JointLimits, n: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let c = limits.center();
    (0..n)
        .map(|_| {
            let mut q = c.clone();
            for j in 0..limits.dof().min(3) {
                q[j] = rng.random_range(limits.q_min[j]..limits.q_max[j]);
            }
            q
        })
        .collect()
}

/// Holding efforts at each pose approached from both directions: the
/// rest torque plus or minus `offset` per motor, mimicking static friction.
pub fn static_samples(
    model: &RobotModel,
    params: &DynamicParameters,
    poses: &[DVector<f64>],
    offset: &DVector<f64>,
) -> Result<Vec<StaticSample>> {
    let mut out = Vec::with_capacity(2 * poses.len());
    for q in poses {
        let g = dynamics::inverse_dynamics(model, params, &JointState::at_rest(q.clone()))?;
        for s in [1.0, -1.0] {
            out.push(StaticSample {
                q: q.clone(),
                tau: &g + offset * s,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::psm_si;

    #[test]
    fn synthetic_parameters_are_consistent() {
        let m = psm_si();
        let p = synthetic_parameters(&m);
        let mask = dynamics::active_mask(&m);
        for (i, v) in p.values.iter().enumerate() {
            if !mask[i] {
                assert_eq!(*v, 0.0, "inactive slot {i}");
            }
        }
        for (k, l) in m.links.iter().enumerate() {
            if l.flags.link_inertia {
                let li = p.link(k);
                let i_com = li.inertia() - li.m * (li.h / li.m).cross_matrix().transpose() * (li.h / li.m).cross_matrix();
                assert!(i_com.symmetric_eigenvalues().min() > 0.0);
            }
        }
    }

    #[test]
    fn static_offsets_are_symmetric() {
        let m = psm_si();
        let p = synthetic_parameters(&m);
        let c = JointLimits::psm_default().center();
        let off = DVector::from_element(7, 0.3);
        let s = static_samples(&m, &p, &[c], &off).unwrap();
        assert_eq!(s.len(), 2);
        assert!(((&s[0].tau + &s[1].tau) * 0.5 - dynamics::inverse_dynamics(&m, &p, &JointState::at_rest(s[0].q.clone())).unwrap()).norm() < 1e-12);
    }
}
