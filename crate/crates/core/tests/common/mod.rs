#![allow(dead_code)]

use dynident_core::dynamics::{AdditionalParams, DynamicParameters, JointState, LinkInertialParams};
use dynident_core::excitation::JointLimits;
use dynident_core::kinematics::{load_model, RobotModel};
use nalgebra::{DVector, Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Planar pendulum about z with gravity along -y; the COM sits on the link x axis.
pub const PENDULUM: &str = r#"
dof = 1
[gravity]
vector = [0.0, -9.81, 0.0]
[[links]]
id = "1"
theta = "q1"
inertia = true
"#;

pub const PENDULUM_FRICTION: &str = r#"
dof = 1
[gravity]
vector = [0.0, -9.81, 0.0]
[[links]]
id = "1"
theta = "q1"
inertia = true
friction = true
"#;

pub const DOUBLE_PENDULUM_FREE: &str = r#"
dof = 2
[gravity]
vector = [0.0, 0.0, 0.0]
[lengths]
l1 = 0.5
[[links]]
id = "1"
theta = "q1"
inertia = true
[[links]]
id = "2"
parent = "1"
a = "l1"
theta = "q2"
inertia = true
"#;

pub fn pendulum() -> RobotModel {
    load_model(PENDULUM).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    Rotation3::new(axis.normalize() * angle).into_inner()
}

/// Physically consistent random parameters on every flagged element.
pub fn random_consistent(model: &RobotModel, rng: &mut impl Rng) -> DynamicParameters {
    let mut p = DynamicParameters::zeros(model);
    for (k, l) in model.links.iter().enumerate() {
        if l.flags.link_inertia {
            let m = rng.random_range(0.3..2.0);
            let com = Vector3::new(
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            );
            let pr = Matrix3::from_diagonal(&Vector3::new(
                rng.random_range(0.01..0.03),
                rng.random_range(0.01..0.03),
                rng.random_range(0.01..0.03),
            ));
            let r = random_rotation(rng);
            p.set_link(k, &LinkInertialParams::from_com(m, com, r * pr * r.transpose()));
        }
        let mut a = AdditionalParams::default();
        if l.flags.friction {
            a.fv = rng.random_range(0.01..0.2);
            a.fc = rng.random_range(0.01..0.2);
            a.fb = rng.random_range(-0.1..0.1);
        }
        if l.flags.motor_inertia {
            a.im = rng.random_range(1e-3..1e-2);
        }
        if l.flags.spring {
            a.ks = rng.random_range(0.01..0.1);
        }
        p.set_additional(k, &a);
    }
    p
}

/// Unconstrained random values on the active entries only.
pub fn random_active(model: &RobotModel, rng: &mut impl Rng) -> DynamicParameters {
    let mask = dynident_core::dynamics::active_mask(model);
    let v = DVector::from_iterator(
        mask.len(),
        mask.iter().map(|&a| if a { rng.random_range(-1.0..1.0) } else { 0.0 }),
    );
    DynamicParameters::from_vector(model, v).unwrap()
}

pub fn random_state(limits: &JointLimits, rng: &mut impl Rng) -> JointState {
    dynident_core::baseparams::random_state(limits, rng)
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn pt_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}
