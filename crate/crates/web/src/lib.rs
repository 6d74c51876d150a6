//! Browser bindings: gravity torques, an open-loop drift check and a short
//! controller comparison on the simulated PSM.

use dynident_core::dynamics::{slot, DynamicParameters, PARAMS_PER_LINK};
use dynident_core::kinematics::{psm_si, RobotModel};
use dynident_core::runtime::{self, Controller, GravityModel};
use dynident_core::sim;
use nalgebra::DVector;
use wasm_bindgen::prelude::*;

fn err(e: dynident_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Plant parameters and a compensator whose first moments are scaled.
fn setup(moment_scale: f64) -> (RobotModel, DynamicParameters, DynamicParameters) {
    let model = psm_si();
    let truth = sim::synthetic_parameters(&model);
    let mut hat = truth.clone();
    for k in 0..model.n_links() {
        for i in 0..3 {
            hat.values[k * PARAMS_PER_LINK + slot::HX + i] *= moment_scale;
        }
    }
    (model, truth, hat)
}

fn pose(q1: f64, q2: f64, q3: f64) -> DVector<f64> {
    let mut q = DVector::zeros(7);
    q[0] = q1;
    q[1] = q2;
    q[2] = q3;
    q
}

/// Motor gravity torques at a pose of the first three joints.
#[wasm_bindgen]
pub fn gravity_torque(q1: f64, q2: f64, q3: f64) -> Result<Vec<f64>, JsError> {
    let (model, truth, _) = setup(1.0);
    let g = runtime::gravity_torque(&model, &truth, &pose(q1, q2, q3)).map_err(err)?;
    Ok(g.as_slice().to_vec())
}

/// Settles the pose under PD, then holds it open loop with the scaled
/// compensator. Returns the report as TOML.
#[wasm_bindgen]
pub fn drift_check(q1: f64, q2: f64, q3: f64, moment_scale: f64, hold: f64) -> Result<String, JsError> {
    let (model, truth, hat) = setup(moment_scale);
    let opts = runtime::DriftOptions {
        hold,
        ..runtime::DriftOptions::psm_default()
    };
    let r = runtime::simulate_drift_test(&model, &truth, GravityModel::Full(&hat), &[pose(q1, q2, q3)], &opts)
        .map_err(err)?;
    Ok(r.to_text())
}

/// Position RMSE of joints 1 to 3 for pid, pid+gravity and pid+ctff, in that
/// order, over `duration` seconds of the sinusoidal test trajectory.
#[wasm_bindgen]
pub fn tracking_rmse(duration: f64, moment_scale: f64) -> Result<Vec<f64>, JsError> {
    let (model, truth, hat) = setup(moment_scale);
    let opts = runtime::TrackingOptions {
        duration: Some(duration),
        ..runtime::TrackingOptions::psm_default()
    };
    let controllers = [
        Controller::Pid,
        Controller::PidGravity(GravityModel::Full(&hat)),
        Controller::PidComputedTorque(&hat),
    ];
    let reports = runtime::compare_controllers(&model, &truth, &controllers, &opts).map_err(err)?;
    Ok(reports
        .iter()
        .flat_map(|r| r.position.iter().take(runtime::EVALUATED_JOINTS).map(|s| s.rmse))
        .collect())
}
