//! Closed-loop virtual environment for the visual servoing controllers.
//!
//! A rectangular target lies on the world plane `z = 0`. The camera looks
//! straight down from `position` (world frame, `z` = height = depth) and can
//! translate in three axes and yaw about the vertical. Image axes are
//! anti-aligned with the body `x`/`y` axes, so for a level camera the feature
//! vector is `[-dx, -dy, Z, theta]` where `(dx, dy)` is the target centroid
//! offset in the body frame. With this convention the feature kinematics are
//! exactly `q_dot = L v` evaluated at `Z = 1`.

use std::f64::consts::PI;

use nalgebra::{Point2, Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interaction::{ibvs_law, interaction_matrix, ControlInput, InteractionError};
use crate::kalman::{self, KalmanConfig, KalmanError, KalmanState};
use crate::moments::{feature_vector, polygon_moments, ConvexPolygon, FeatureVector, MomentError};
use crate::mpc::{mpc_step_warm, MpcConfig, MpcError, QpStatus, WarmStart};
use crate::ConfigViolation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("target is behind the camera (depth {0})")]
    TargetBehindCamera(f64),
    #[error("trial diverged at t = {t:.3} s (|e| = {norm:.3})")]
    TrialDiverged { t: f64, norm: f64 },
    #[error("invalid scenario: {0:?}")]
    InvalidScenario(Vec<ConfigViolation>),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
}

/// Controller variants compared in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    /// Classical law `v = -lambda L^-1 e`.
    #[serde(rename = "IBVS")]
    Ibvs,
    /// MPC without constraints.
    #[serde(rename = "MPC")]
    Mpc,
    /// MPC with input bounds.
    #[serde(rename = "MPC1")]
    Mpc1,
    /// MPC with input, state and terminal constraints.
    #[serde(rename = "MPC2")]
    Mpc2,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [Self::Ibvs, Self::Mpc, Self::Mpc1, Self::Mpc2];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ibvs => "IBVS",
            Self::Mpc => "MPC",
            Self::Mpc1 => "MPC1",
            Self::Mpc2 => "MPC2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    /// Applies this variant's constraint switches to a base configuration.
    pub fn configure(&self, base: &MpcConfig) -> MpcConfig {
        let mut cfg = base.clone();
        let (input, state, terminal) = match self {
            Self::Ibvs | Self::Mpc => (false, false, false),
            Self::Mpc1 => (true, false, false),
            Self::Mpc2 => (true, true, true),
        };
        cfg.input_constraints = input;
        cfg.state_constraints = state;
        cfg.terminal_constraint = terminal;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// World position; `position[2]` is the height above the target plane.
    pub position: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraState {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub time: f64,
}

impl CameraState {
    pub fn from_pose(pose: &Pose) -> Self {
        Self {
            position: Vector3::from(pose.position),
            yaw: pose.yaw,
            time: 0.0,
        }
    }

    /// Distance to the target plane along the optical axis.
    pub fn depth(&self) -> f64 {
        self.position.z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Target outline in world-plane coordinates (meters).
    pub target: ConvexPolygon,
    /// Pose at which the reference features are taken; its height is `Z*`.
    pub desired: Pose,
    pub initial: Pose,
    pub controller: ControllerKind,
    pub kf_enabled: bool,
    /// Standard deviation of additive Gaussian noise per feature.
    pub noise_std: [f64; 4],
    /// Half-open `[start, end)` intervals (seconds) without measurements.
    pub dropout_windows: Vec<[f64; 2]>,
    pub duration: f64,
    pub control_rate: f64,
    pub safety_vmax: f64,
    pub seed: u64,
    /// Gain `lambda` of the classical IBVS law.
    pub ibvs_gain: f64,
    /// Use the true depth in `L` instead of the constant `Z*`.
    pub use_true_depth: bool,
    /// Time constant (s) of an optional first-order velocity-tracking lag.
    pub velocity_lag: Option<f64>,
    /// Half extents of the field of view in normalized image coordinates.
    pub fov: [f64; 2],
    pub convergence_threshold: f64,
    /// Seconds the error must stay below the threshold to count as converged.
    pub convergence_hold: f64,
    pub divergence_limit: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            target: ConvexPolygon::rectangle(0.0, 0.0, 0.4, 0.2).expect("valid rectangle"),
            desired: Pose {
                position: [0.0, 0.0, 1.0],
                yaw: 0.0,
            },
            initial: Pose {
                position: [0.4, 0.0, 1.3],
                yaw: 20f64.to_radians(),
            },
            controller: ControllerKind::Mpc2,
            kf_enabled: false,
            noise_std: [0.0; 4],
            dropout_windows: Vec::new(),
            duration: 15.0,
            control_rate: 30.0,
            safety_vmax: 1.0,
            seed: 0,
            ibvs_gain: 1.0,
            use_true_depth: false,
            velocity_lag: None,
            fov: [0.8, 0.6],
            convergence_threshold: 0.1,
            convergence_hold: 1.0,
            divergence_limit: 100.0,
        }
    }
}

impl Scenario {
    pub fn z_star(&self) -> f64 {
        self.desired.position[2]
    }

    pub fn steps(&self) -> usize {
        (self.duration * self.control_rate).round() as usize
    }

    pub fn in_dropout(&self, t: f64) -> bool {
        self.dropout_windows.iter().any(|[a, b]| t >= *a && t < *b)
    }

    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        let mut push = |f: &str, m: String| out.push(ConfigViolation::new(format!("scenario.{f}"), m));
        if !(self.desired.position[2] > 0.0) {
            push("desired.position", "desired height (Z*) must be > 0".into());
        }
        if !(self.initial.position[2] > 0.0) {
            push("initial.position", "initial height must be > 0".into());
        }
        if !(self.duration > 0.0) {
            push("duration", format!("must be > 0, got {}", self.duration));
        }
        if !(self.control_rate > 0.0) {
            push("control_rate", format!("must be > 0, got {}", self.control_rate));
        }
        if !(self.safety_vmax > 0.0) {
            push("safety_vmax", format!("must be > 0, got {}", self.safety_vmax));
        }
        if !(self.ibvs_gain > 0.0) {
            push("ibvs_gain", format!("must be > 0, got {}", self.ibvs_gain));
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            push("noise_std", "entries must be >= 0".into());
        }
        for (i, [a, b]) in self.dropout_windows.iter().enumerate() {
            if !(*a >= 0.0 && a < b && *b <= self.duration) {
                push(
                    "dropout_windows",
                    format!("window {i} [{a}, {b}) must satisfy 0 <= start < end <= duration ({})", self.duration),
                );
            }
        }
        if let Some(tau) = self.velocity_lag {
            if !(tau > 0.0) {
                push("velocity_lag", "time constant must be > 0".into());
            }
        }
        if !(self.fov[0] > 0.0 && self.fov[1] > 0.0) {
            push("fov", "half extents must be > 0".into());
        }
        if !(self.convergence_threshold > 0.0) {
            push("convergence_threshold", "must be > 0".into());
        }
        if !(self.convergence_hold >= 0.0) {
            push("convergence_hold", "must be >= 0".into());
        }
        if !(self.divergence_limit > 0.0) {
            push("divergence_limit", "must be > 0".into());
        }
        out
    }

    /// Reference features `q*` and the desired area measure `a*`.
    pub fn reference(&self) -> Result<Reference, SimError> {
        let cam = CameraState::from_pose(&self.desired);
        let image = project_target(&self.target, &cam)?;
        let moms = polygon_moments(&image)?;
        let a_star = moms.area_measure();
        let z_star = self.z_star();
        let q_star = feature_vector(&moms, z_star, a_star)?;
        Ok(Reference {
            q_star,
            z_star,
            a_star,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub q_star: FeatureVector,
    pub z_star: f64,
    pub a_star: f64,
}

/// Pinhole projection of the world-plane target into normalized image
/// coordinates.
pub fn project_target(target: &ConvexPolygon, cam: &CameraState) -> Result<ConvexPolygon, SimError> {
    let z = cam.depth();
    if !(z > 0.0) {
        return Err(SimError::TargetBehindCamera(z));
    }
    let (s, c) = cam.yaw.sin_cos();
    let pts = target
        .vertices()
        .iter()
        .map(|p| {
            let (wx, wy) = (p.x - cam.position.x, p.y - cam.position.y);
            // world -> body: R(-yaw)
            let bx = c * wx + s * wy;
            let by = -s * wx + c * wy;
            Point2::new(-bx / z, -by / z)
        })
        .collect();
    Ok(ConvexPolygon::new(pts)?)
}

/// What the camera delivers at one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Noisy features, `None` during dropout or when the target leaves the FOV.
    pub measured: Option<FeatureVector>,
    /// Noise-free features.
    pub truth: FeatureVector,
    pub true_depth: f64,
    pub in_fov: bool,
}

/// Projects the target, computes its features and corrupts them with the
/// scenario noise. Noise is drawn on every call so the random stream does not
/// depend on measurement availability.
pub fn observe<R: Rng + ?Sized>(
    cam: &CameraState,
    scenario: &Scenario,
    reference: &Reference,
    rng: &mut R,
) -> Result<Observation, SimError> {
    let image = project_target(&scenario.target, cam)?;
    let moms = polygon_moments(&image)?;
    let truth = feature_vector(&moms, reference.z_star, reference.a_star)?;
    let in_fov = image
        .vertices()
        .iter()
        .all(|p| p.x.abs() <= scenario.fov[0] && p.y.abs() <= scenario.fov[1]);

    let mut noise = [0.0; 4];
    for (n, std) in noise.iter_mut().zip(scenario.noise_std) {
        if std > 0.0 {
            *n = Normal::new(0.0, std).expect("validated std").sample(rng);
        }
    }
    let noisy = FeatureVector::from_vector(&(truth.as_vector() + Vector4::from(noise)));
    let measured = (in_fov && !scenario.in_dropout(cam.time)).then_some(noisy);
    Ok(Observation {
        measured,
        truth,
        true_depth: cam.depth(),
        in_fov,
    })
}

/// Advances the camera under a body-frame velocity held constant over `dt`.
/// Translation follows the exact arc traced while yawing at `omega_z`.
pub fn integrate(cam: &CameraState, u: &ControlInput, dt: f64) -> CameraState {
    let psi0 = cam.yaw;
    let psi1 = psi0 + u.omega_z * dt;
    let w = u.omega_z;
    // Integral of R(psi(t)) over the step.
    let (ic, is) = if (w * dt).abs() < 1e-9 {
        let mid = psi0 + 0.5 * w * dt;
        (mid.cos() * dt, mid.sin() * dt)
    } else {
        ((psi1.sin() - psi0.sin()) / w, (psi0.cos() - psi1.cos()) / w)
    };
    let dx = ic * u.v_x - is * u.v_y;
    let dy = is * u.v_x + ic * u.v_y;
    CameraState {
        position: cam.position + Vector3::new(dx, dy, u.v_z * dt),
        yaw: psi1,
        time: cam.time + dt,
    }
}

/// Componentwise clamp of the translational velocity; yaw rate passes through.
pub fn safety_clamp(u: &ControlInput, vmax: f64) -> ControlInput {
    ControlInput {
        v_x: u.v_x.clamp(-vmax, vmax),
        v_y: u.v_y.clamp(-vmax, vmax),
        v_z: u.v_z.clamp(-vmax, vmax),
        omega_z: u.omega_z,
    }
}

/// One control tick of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub q: FeatureVector,
    pub q_star: FeatureVector,
    /// True feature error (noise-free).
    pub e: Vector4<f64>,
    /// Error the controller acted on, if it acted.
    pub e_ctrl: Option<Vector4<f64>>,
    pub u_cmd: ControlInput,
    pub u_applied: ControlInput,
    pub kf_estimate: Option<Vector4<f64>>,
    pub measurement_valid: bool,
    pub qp_status: Option<QpStatus>,
    /// MPC predicted errors `e(k+1) .. e(k+N)`; empty for IBVS and held steps.
    pub predicted: Vec<Vector4<f64>>,
    pub mpc_cost: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub convergence_time: Option<f64>,
    pub rmse_error: f64,
    pub rmse_joint: f64,
    pub constraint_violations: usize,
    /// Per-axis std of successive command differences.
    pub oscillation_std: [f64; 4],
    /// Mean of the translational entries of `oscillation_std`.
    pub oscillation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub controller: ControllerKind,
    pub kf_enabled: bool,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub summary: TrialSummary,
}

/// Summary metrics of a recorded series.
///
/// `rmse_error = sqrt(mean |e|^2)`; `rmse_joint = sqrt(mean |e|^2 + mean |v|^2)`
/// with `v` the translational part of the pre-clamp command; convergence is the
/// first time `|e|` drops below `threshold` and stays there for `hold` seconds.
pub fn compute_metrics(records: &[StepRecord], threshold: f64, hold: f64) -> TrialSummary {
    let n = records.len().max(1) as f64;
    let e2: Vec<f64> = records.iter().map(|r| r.e.norm_squared()).collect();
    let mean_e2 = e2.iter().sum::<f64>() / n;
    let mean_v2 = records
        .iter()
        .map(|r| r.u_cmd.translational_norm().powi(2))
        .sum::<f64>()
        / n;

    let mut convergence_time = None;
    let mut start: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if e2[i].sqrt() < threshold {
            let s = *start.get_or_insert(i);
            if r.t - records[s].t >= hold - 1e-9 {
                convergence_time = Some(records[s].t);
                break;
            }
        } else {
            start = None;
        }
    }

    let mut oscillation_std = [0.0; 4];
    if records.len() > 2 {
        for (axis, out) in oscillation_std.iter_mut().enumerate() {
            let diffs: Vec<f64> = records
                .windows(2)
                .map(|w| w[1].u_cmd.as_vector()[axis] - w[0].u_cmd.as_vector()[axis])
                .collect();
            let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / diffs.len() as f64;
            *out = var.sqrt();
        }
    }

    TrialSummary {
        convergence_time,
        rmse_error: mean_e2.sqrt(),
        rmse_joint: (mean_e2 + mean_v2).sqrt(),
        constraint_violations: 0,
        oscillation: oscillation_std[..3].iter().sum::<f64>() / 3.0,
        oscillation_std,
    }
}

/// Counts MPC steps with optimal status whose command breaks the input box
/// or whose predicted errors leave the state box (by more than `tol`).
pub fn count_constraint_violations(records: &[StepRecord], cfg: &MpcConfig, tol: f64) -> usize {
    records
        .iter()
        .filter(|r| r.qp_status == Some(QpStatus::Optimal))
        .filter(|r| {
            let u = r.u_cmd.as_vector();
            let input_bad = cfg.input_constraints
                && (0..4).any(|i| u[i] > cfg.u_max[i] + tol || u[i] < cfg.u_min[i] - tol);
            let state_bad = cfg.state_constraints
                && r.predicted
                    .iter()
                    .any(|e| (0..4).any(|i| e[i] > cfg.e_max[i] + tol || e[i] < cfg.e_min[i] - tol));
            let terminal_bad = cfg.terminal_constraint
                && r.predicted
                    .last()
                    .is_some_and(|e| (0..4).any(|i| e[i].abs() > cfg.eps_term[i] + tol));
            input_bad || state_bad || terminal_bad
        })
        .count()
}

/// Shifts an optimal input sequence one stage forward, repeating the last stage.
fn shifted(u: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
    let n = u.len();
    let mut out = u.clone();
    if n > 4 {
        out.rows_mut(0, n - 4).copy_from(&u.rows(4, n - 4));
    }
    out
}

/// Runs one closed-loop trial. `mpc_cfg` supplies weights and bounds; the
/// constraint switches come from the scenario's controller kind and the
/// sample period from its control rate.
pub fn run_trial(scenario: &Scenario, mpc_cfg: &MpcConfig, kf_cfg: &KalmanConfig) -> Result<TrialResult, SimError> {
    let mut violations = scenario.violations();
    violations.extend(mpc_cfg.violations());
    violations.extend(kf_cfg.violations());
    if !violations.is_empty() {
        return Err(SimError::InvalidScenario(violations));
    }

    let dt = 1.0 / scenario.control_rate;
    let mut cfg = scenario.controller.configure(mpc_cfg);
    cfg.sample_period = dt;
    let reference = scenario.reference()?;
    let q_star = reference.q_star;

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut cam = CameraState::from_pose(&scenario.initial);
    let mut v_actual = ControlInput::zero();
    let mut last_cmd = ControlInput::zero();
    let mut kf_state: Option<KalmanState> = kf_cfg
        .initial_state
        .map(|x0| kf_cfg.initial(Vector4::from(x0)));
    let mut warm: Option<WarmStart> = None;

    let steps = scenario.steps();
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        cam.time = k as f64 * dt;
        let obs = observe(&cam, scenario, &reference, &mut rng)?;
        let e_true = obs.truth.error_from(&q_star);
        if e_true.norm() > scenario.divergence_limit || !e_true.iter().all(|v| v.is_finite()) {
            return Err(SimError::TrialDiverged {
                t: cam.time,
                norm: e_true.norm(),
            });
        }

        let mut kf_estimate = None;
        let mut stale = false;
        let feature = if scenario.kf_enabled {
            let z = obs.measured.map(|m| m.as_vector());
            let state = match kf_state {
                Some(s) => s,
                None => kf_cfg.initial(z.unwrap_or_else(|| q_star.as_vector())),
            };
            let out = kalman::step(&state, z.as_ref(), kf_cfg)?;
            kf_state = Some(out.state);
            kf_estimate = Some(out.estimate);
            stale = out.stale;
            Some(FeatureVector::from_vector(&out.estimate))
        } else {
            obs.measured
        };

        let mut qp_status = None;
        let mut predicted = Vec::new();
        let mut mpc_cost = None;
        let mut e_ctrl = None;
        let u_cmd = match feature {
            // Stale filter output: hover in place.
            Some(_) if stale => ControlInput::zero(),
            Some(q) => {
                let e = q.error_from(&q_star);
                e_ctrl = Some(e);
                let z = if scenario.use_true_depth {
                    obs.true_depth
                } else {
                    reference.z_star
                };
                let l = interaction_matrix(&q, z)?;
                match scenario.controller {
                    ControllerKind::Ibvs => ibvs_law(&q, &q_star, &l, scenario.ibvs_gain)?,
                    _ => {
                        let step = mpc_step_warm(&e, &l, &cfg, warm.as_ref())?;
                        qp_status = Some(step.solution.status);
                        warm = Some(WarmStart {
                            u: Some(shifted(&step.solution.u)),
                            lambda: None,
                        });
                        predicted = step.predicted;
                        mpc_cost = Some(step.cost);
                        step.u
                    }
                }
            }
            None => last_cmd,
        };
        last_cmd = u_cmd;
        let u_applied = safety_clamp(&u_cmd, scenario.safety_vmax);

        records.push(StepRecord {
            t: cam.time,
            q: obs.truth,
            q_star,
            e: e_true,
            e_ctrl,
            u_cmd,
            u_applied,
            kf_estimate,
            measurement_valid: obs.measured.is_some(),
            qp_status,
            predicted,
            mpc_cost,
        });

        v_actual = match scenario.velocity_lag {
            Some(tau) => {
                let a = 1.0 - (-dt / tau).exp();
                ControlInput::from_vector(&(v_actual.as_vector() + (u_applied.as_vector() - v_actual.as_vector()) * a))
            }
            None => u_applied,
        };
        cam = integrate(&cam, &v_actual, dt);
        if !(cam.depth() > 0.0) {
            return Err(SimError::TargetBehindCamera(cam.depth()));
        }
    }

    let mut summary = compute_metrics(&records, scenario.convergence_threshold, scenario.convergence_hold);
    summary.constraint_violations = match scenario.controller {
        ControllerKind::Ibvs | ControllerKind::Mpc => 0,
        _ => count_constraint_violations(&records, &cfg, 1e-8),
    };
    Ok(TrialResult {
        controller: scenario.controller,
        kf_enabled: scenario.kf_enabled,
        seed: scenario.seed,
        records,
        summary,
    })
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}
