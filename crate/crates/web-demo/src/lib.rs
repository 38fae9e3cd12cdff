//! Browser bindings for the visual servoing simulator.
//!
//! Every entry point takes plain numbers and returns a JSON string so the page
//! needs no generated TypeScript types.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ibvs_mpc::kalman::KalmanConfig;
use ibvs_mpc::moments::{feature_vector, polygon_moments};
use ibvs_mpc::mpc::MpcConfig;
use ibvs_mpc::simworld::{project_target, run_trial, CameraState, ControllerKind, Pose, Scenario, TrialSummary};

#[derive(Serialize)]
struct Series {
    controller: &'static str,
    kf: bool,
    t: Vec<f64>,
    e_norm: Vec<f64>,
    e: [Vec<f64>; 4],
    u_cmd: [Vec<f64>; 4],
    meas_valid: Vec<bool>,
    summary: TrialSummary,
}

#[derive(Serialize)]
struct View {
    /// Target outline in normalized image coordinates.
    polygon: Vec<[f64; 2]>,
    features: [f64; 4],
    reference: [f64; 4],
    in_fov: bool,
    fov: [f64; 2],
}

#[derive(Serialize)]
struct Row {
    controller: &'static str,
    convergence_time: Option<f64>,
    rmse_error: f64,
    rmse_joint: f64,
    oscillation: f64,
}

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[allow(clippy::too_many_arguments)]
fn scenario(
    x: f64,
    y: f64,
    z: f64,
    yaw_deg: f64,
    noise: f64,
    dropout_start: f64,
    dropout_len: f64,
    seed: u32,
) -> Scenario {
    let mut sc = Scenario {
        initial: Pose {
            position: [x, y, z],
            yaw: yaw_deg.to_radians(),
        },
        noise_std: [0.02, 0.02, 0.02, 0.05].map(|s| s * noise.max(0.0)),
        duration: 10.0,
        seed: seed as u64,
        ..Scenario::default()
    };
    if dropout_len > 0.0 {
        let end = (dropout_start + dropout_len).min(sc.duration);
        if dropout_start >= 0.0 && dropout_start < end {
            sc.dropout_windows = vec![[dropout_start, end]];
        }
    }
    sc
}

/// Runs one trial and returns its time series as JSON.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    controller: &str,
    kf: bool,
    x: f64,
    y: f64,
    z: f64,
    yaw_deg: f64,
    noise: f64,
    dropout_start: f64,
    dropout_len: f64,
    seed: u32,
) -> Result<String, JsValue> {
    let kind = ControllerKind::parse(controller).ok_or_else(|| err(format!("unknown controller {controller}")))?;
    let mut sc = scenario(x, y, z, yaw_deg, noise, dropout_start, dropout_len, seed);
    sc.controller = kind;
    sc.kf_enabled = kf;
    let res = run_trial(&sc, &MpcConfig::default(), &KalmanConfig::default()).map_err(err)?;
    let col = |f: &dyn Fn(&ibvs_mpc::simworld::StepRecord) -> f64| res.records.iter().map(f).collect::<Vec<_>>();
    let series = Series {
        controller: kind.name(),
        kf,
        t: col(&|r| r.t),
        e_norm: col(&|r| r.e.norm()),
        e: [col(&|r| r.e[0]), col(&|r| r.e[1]), col(&|r| r.e[2]), col(&|r| r.e[3])],
        u_cmd: [
            col(&|r| r.u_cmd.v_x),
            col(&|r| r.u_cmd.v_y),
            col(&|r| r.u_cmd.v_z),
            col(&|r| r.u_cmd.omega_z),
        ],
        meas_valid: res.records.iter().map(|r| r.measurement_valid).collect(),
        summary: res.summary,
    };
    serde_json::to_string(&series).map_err(err)
}

/// Camera view of the target from a pose: projected outline and features.
#[wasm_bindgen]
pub fn camera_view(x: f64, y: f64, z: f64, yaw_deg: f64) -> Result<String, JsValue> {
    let sc = Scenario::default();
    let reference = sc.reference().map_err(err)?;
    let cam = CameraState::from_pose(&Pose {
        position: [x, y, z],
        yaw: yaw_deg.to_radians(),
    });
    let image = project_target(&sc.target, &cam).map_err(err)?;
    let moms = polygon_moments(&image).map_err(err)?;
    let q = feature_vector(&moms, reference.z_star, reference.a_star).map_err(err)?;
    let polygon: Vec<[f64; 2]> = image.vertices().iter().map(|p| [p.x, p.y]).collect();
    let in_fov = polygon.iter().all(|p| p[0].abs() <= sc.fov[0] && p[1].abs() <= sc.fov[1]);
    let view = View {
        polygon,
        features: [q.x_n, q.y_n, q.a_n, q.theta],
        reference: [
            reference.q_star.x_n,
            reference.q_star.y_n,
            reference.q_star.a_n,
            reference.q_star.theta,
        ],
        in_fov,
        fov: sc.fov,
    };
    serde_json::to_string(&view).map_err(err)
}

/// Runs all four controllers from the same start and seed and returns their
/// summary metrics.
#[wasm_bindgen]
pub fn compare_controllers(x: f64, y: f64, z: f64, yaw_deg: f64, noise: f64, kf: bool, seed: u32) -> Result<String, JsValue> {
    let mut rows = Vec::new();
    for kind in ControllerKind::ALL {
        let mut sc = scenario(x, y, z, yaw_deg, noise, 0.0, 0.0, seed);
        sc.controller = kind;
        sc.kf_enabled = kf;
        let s = run_trial(&sc, &MpcConfig::default(), &KalmanConfig::default())
            .map_err(err)?
            .summary;
        rows.push(Row {
            controller: kind.name(),
            convergence_time: s.convergence_time,
            rmse_error: s.rmse_error,
            rmse_joint: s.rmse_joint,
            oscillation: s.oscillation,
        });
    }
    serde_json::to_string(&rows).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_returns_aligned_series() {
        let json = simulate("MPC2", true, 0.4, 0.0, 1.3, 20.0, 1.0, 3.0, 0.5, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let n = v["t"].as_array().unwrap().len();
        assert_eq!(n, 300);
        assert_eq!(v["u_cmd"][0].as_array().unwrap().len(), n);
        let missing = v["meas_valid"].as_array().unwrap().iter().filter(|b| !b.as_bool().unwrap()).count();
        assert_eq!(missing, 15);
        assert!(v["summary"]["convergence_time"].is_number());
    }

    #[test]
    fn view_at_reference_matches_reference() {
        let v: serde_json::Value = serde_json::from_str(&camera_view(0.0, 0.0, 1.0, 0.0).unwrap()).unwrap();
        for i in 0..4 {
            let a = v["features"][i].as_f64().unwrap();
            let b = v["reference"][i].as_f64().unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(v["polygon"].as_array().unwrap().len(), 4);
        assert!(v["in_fov"].as_bool().unwrap());
    }

    #[test]
    fn compare_lists_four_controllers() {
        let v: serde_json::Value =
            serde_json::from_str(&compare_controllers(0.3, 0.1, 1.2, 10.0, 0.0, false, 0).unwrap()).unwrap();
        let names: Vec<_> = v.as_array().unwrap().iter().map(|r| r["controller"].as_str().unwrap()).collect();
        assert_eq!(names, ["IBVS", "MPC", "MPC1", "MPC2"]);
    }

    #[test]
    fn unknown_controller_is_rejected() {
        assert!(ControllerKind::parse("PID").is_none());
    }
}
