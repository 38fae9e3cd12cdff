//! Linear Kalman filter over the 4-D feature vector, used to bridge noisy or
//! missing moment measurements.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mpc::mat4;
use crate::ConfigViolation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KalmanError {
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("invalid Kalman configuration: {0:?}")]
    InvalidConfig(Vec<ConfigViolation>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanConfig {
    pub transition: [[f64; 4]; 4],
    pub observation: [[f64; 4]; 4],
    pub process_noise: [[f64; 4]; 4],
    pub measurement_noise: [[f64; 4]; 4],
    pub initial_covariance: [[f64; 4]; 4],
    /// Initial estimate; `None` lets the caller seed from the first measurement.
    pub initial_state: Option<[f64; 4]>,
    /// Prediction-only steps tolerated before the estimate is flagged stale.
    pub max_dropout: usize,
}

fn diag(d: [f64; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = d[i];
    }
    m
}

impl Default for KalmanConfig {
    fn default() -> Self {
        let sigma = [0.02, 0.02, 0.02, 0.05];
        Self {
            transition: diag([1.0; 4]),
            observation: diag([1.0; 4]),
            process_noise: diag([1e-4; 4]),
            measurement_noise: diag(sigma.map(|s| s * s)),
            initial_covariance: diag([1.0; 4]),
            initial_state: None,
            max_dropout: 30,
        }
    }
}

fn symmetric_eigen_min(m: &Matrix4<f64>) -> Option<f64> {
    let sym = (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
    sym.then(|| m.symmetric_eigen().eigenvalues.min())
}

impl KalmanConfig {
    pub fn a(&self) -> Matrix4<f64> {
        mat4(&self.transition)
    }

    pub fn c(&self) -> Matrix4<f64> {
        mat4(&self.observation)
    }

    pub fn q(&self) -> Matrix4<f64> {
        mat4(&self.process_noise)
    }

    pub fn r(&self) -> Matrix4<f64> {
        mat4(&self.measurement_noise)
    }

    pub fn p0(&self) -> Matrix4<f64> {
        mat4(&self.initial_covariance)
    }

    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        let all = [
            ("transition", &self.transition),
            ("observation", &self.observation),
            ("process_noise", &self.process_noise),
            ("measurement_noise", &self.measurement_noise),
            ("initial_covariance", &self.initial_covariance),
        ];
        for (name, m) in all {
            if mat4(m).iter().any(|v| !v.is_finite()) {
                out.push(ConfigViolation::new(format!("kalman.{name}"), "must be finite".into()));
            }
        }
        for (name, m, strict) in [
            ("process_noise", self.q(), false),
            ("initial_covariance", self.p0(), false),
            ("measurement_noise", self.r(), true),
        ] {
            match symmetric_eigen_min(&m) {
                Some(ev) if strict && ev <= 0.0 => out.push(ConfigViolation::new(
                    format!("kalman.{name}"),
                    "must be positive definite".into(),
                )),
                Some(ev) if !strict && ev < -1e-12 => out.push(ConfigViolation::new(
                    format!("kalman.{name}"),
                    "must be positive semi-definite".into(),
                )),
                None => out.push(ConfigViolation::new(format!("kalman.{name}"), "must be symmetric".into())),
                _ => {}
            }
        }
        if let Some(x0) = self.initial_state {
            if x0.iter().any(|v| !v.is_finite()) {
                out.push(ConfigViolation::new("kalman.initial_state", "must be finite".into()));
            }
        }
        out
    }

    /// Filter state at `x0` with the configured initial covariance.
    pub fn initial(&self, x0: Vector4<f64>) -> KalmanState {
        KalmanState {
            x_hat: x0,
            p: self.p0(),
            steps_since_update: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub x_hat: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub steps_since_update: usize,
}

fn symmetrize(p: Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

/// Time update: `x = A x`, `P = A P A' + Q`.
pub fn predict(state: &KalmanState, cfg: &KalmanConfig) -> KalmanState {
    let a = cfg.a();
    KalmanState {
        x_hat: a * state.x_hat,
        p: symmetrize(a * state.p * a.transpose() + cfg.q()),
        steps_since_update: state.steps_since_update + 1,
    }
}

/// Measurement update with the standard gain `K = P C' S^-1`.
pub fn update(state: &KalmanState, z: &Vector4<f64>, cfg: &KalmanConfig) -> Result<KalmanState, KalmanError> {
    let c = cfg.c();
    let innovation = z - c * state.x_hat;
    let s = c * state.p * c.transpose() + cfg.r();
    let s_inv = s.try_inverse().ok_or(KalmanError::SingularInnovation)?;
    if s_inv.iter().any(|v| !v.is_finite()) {
        return Err(KalmanError::SingularInnovation);
    }
    let k = state.p * c.transpose() * s_inv;
    Ok(KalmanState {
        x_hat: state.x_hat + k * innovation,
        p: symmetrize((Matrix4::identity() - k * c) * state.p),
        steps_since_update: 0,
    })
}

/// Optimal gain for a given prior, exposed for diagnostics.
pub fn gain(state: &KalmanState, cfg: &KalmanConfig) -> Option<Matrix4<f64>> {
    let c = cfg.c();
    let s = c * state.p * c.transpose() + cfg.r();
    s.try_inverse().map(|s_inv| state.p * c.transpose() * s_inv)
}

/// Result of one filter tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanStep {
    pub state: KalmanState,
    /// Estimate handed to the controller.
    pub estimate: Vector4<f64>,
    /// Set once the filter has run prediction-only for more than `max_dropout` ticks.
    pub stale: bool,
}

/// Predict, then update when a measurement is present.
pub fn step(state: &KalmanState, z: Option<&Vector4<f64>>, cfg: &KalmanConfig) -> Result<KalmanStep, KalmanError> {
    let prior = predict(state, cfg);
    let post = match z {
        Some(z) => update(&prior, z, cfg)?,
        None => prior,
    };
    Ok(KalmanStep {
        estimate: post.x_hat,
        stale: post.steps_since_update > cfg.max_dropout,
        state: post,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    fn cfg_with(q: f64, r: f64) -> KalmanConfig {
        KalmanConfig {
            process_noise: diag([q; 4]),
            measurement_noise: diag([r; 4]),
            ..KalmanConfig::default()
        }
    }

    #[test]
    fn identity_predict_grows_covariance() {
        let cfg = KalmanConfig::default();
        let s0 = cfg.initial(Vector4::new(0.1, 0.2, 1.0, 0.0));
        let s1 = predict(&s0, &cfg);
        assert_eq!(s1.x_hat, s0.x_hat);
        assert_relative_eq!(s1.p, s0.p + cfg.q(), epsilon = 1e-15);
        assert_eq!(s1.steps_since_update, 1);
    }

    #[test]
    fn no_process_noise_is_fixed_point() {
        let cfg = cfg_with(0.0, 1.0);
        let s0 = cfg.initial(Vector4::new(0.3, -0.1, 2.0, 0.2));
        let s1 = predict(&s0, &cfg);
        assert_eq!(s1.x_hat, s0.x_hat);
        assert_eq!(s1.p, s0.p);
    }

    #[test]
    fn repeated_predicts_accumulate_exactly() {
        let cfg = cfg_with(0.25, 1.0);
        let mut s = cfg.initial(Vector4::zeros());
        for _ in 0..7 {
            s = predict(&s, &cfg);
        }
        assert_eq!(s.p, cfg.p0() + cfg.q() * 7.0);
    }

    #[test]
    fn unit_case_halves_innovation() {
        let cfg = cfg_with(0.0, 1.0);
        let prior = cfg.initial(Vector4::new(1.0, 2.0, 3.0, 4.0));
        let k = gain(&prior, &cfg).unwrap();
        assert_relative_eq!(k, Matrix4::identity() * 0.5, epsilon = 1e-15);
        let z = Vector4::new(3.0, 0.0, 3.0, -4.0);
        let post = update(&prior, &z, &cfg).unwrap();
        assert_relative_eq!(post.x_hat, (prior.x_hat + z) * 0.5, epsilon = 1e-15);
        assert_relative_eq!(post.p, Matrix4::identity() * 0.5, epsilon = 1e-15);
        assert_eq!(post.steps_since_update, 0);
    }

    #[test]
    fn distrusted_measurement_is_ignored() {
        let cfg = cfg_with(0.0, 1e9);
        let prior = cfg.initial(Vector4::new(1.0, -1.0, 2.0, 0.5));
        let post = update(&prior, &Vector4::new(5.0, 5.0, 5.0, 5.0), &cfg).unwrap();
        for i in 0..4 {
            assert!((post.x_hat[i] - prior.x_hat[i]).abs() <= 1e-6 * prior.x_hat[i].abs().max(1.0));
        }
    }

    #[test]
    fn zero_innovation_contracts_covariance() {
        let cfg = KalmanConfig::default();
        let prior = cfg.initial(Vector4::new(0.1, 0.0, 1.0, 0.0));
        let post = update(&prior, &prior.x_hat, &cfg).unwrap();
        assert_eq!(post.x_hat, prior.x_hat);
        assert!(post.p.trace() < prior.p.trace());
    }

    #[test]
    fn singular_innovation_detected() {
        let cfg = KalmanConfig {
            measurement_noise: [[0.0; 4]; 4],
            initial_covariance: [[0.0; 4]; 4],
            ..KalmanConfig::default()
        };
        let s = cfg.initial(Vector4::zeros());
        assert_eq!(update(&s, &Vector4::zeros(), &cfg), Err(KalmanError::SingularInnovation));
        assert!(!cfg.violations().is_empty());
    }

    #[test]
    fn dropout_holds_estimate() {
        let cfg = KalmanConfig::default();
        let mut s = cfg.initial(Vector4::new(0.2, 0.1, 1.0, 0.0));
        let x0 = s.x_hat;
        let p0 = s.p;
        for k in 1..=10 {
            let out = step(&s, None, &cfg).unwrap();
            assert_eq!(out.estimate, x0);
            assert_eq!(out.state.steps_since_update, k);
            assert_relative_eq!(out.state.p, p0 + cfg.q() * k as f64, epsilon = 1e-14);
            s = out.state;
        }
    }

    #[test]
    fn alternating_measurements_bookkeeping() {
        let cfg = KalmanConfig::default();
        let mut s = cfg.initial(Vector4::zeros());
        let z = Vector4::new(0.1, 0.1, 1.0, 0.0);
        for k in 0..10 {
            let meas = (k % 2 == 0).then_some(&z);
            let out = step(&s, meas, &cfg).unwrap();
            assert_eq!(out.state.steps_since_update, if k % 2 == 0 { 0 } else { 1 });
            s = out.state;
        }
    }

    #[test]
    fn stale_after_max_dropout() {
        let cfg = KalmanConfig {
            max_dropout: 3,
            ..KalmanConfig::default()
        };
        let mut s = cfg.initial(Vector4::zeros());
        let mut flags = Vec::new();
        for _ in 0..5 {
            let out = step(&s, None, &cfg).unwrap();
            flags.push(out.stale);
            s = out.state;
        }
        assert_eq!(flags, vec![false, false, false, true, true]);
    }

    #[test]
    fn filtering_beats_raw_measurements() {
        let cfg = KalmanConfig::default();
        let truth = Vector4::new(0.1, -0.2, 1.5, 0.3);
        let sigma = [0.02, 0.02, 0.02, 0.05];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normals: Vec<_> = sigma.iter().map(|s| Normal::new(0.0, *s).unwrap()).collect();
        let mut s = cfg.initial(truth);
        let (mut filt, mut raw) = (0.0, 0.0);
        for k in 0..500 {
            let z = truth + Vector4::from_fn(|i, _| normals[i].sample(&mut rng));
            let out = step(&s, Some(&z), &cfg).unwrap();
            s = out.state;
            if k >= 400 {
                for i in 0..4 {
                    filt += ((out.estimate[i] - truth[i]) / sigma[i]).abs();
                    raw += ((z[i] - truth[i]) / sigma[i]).abs();
                }
            }
        }
        // Per-feature errors are normalized by their noise std before averaging.
        assert!(filt / 400.0 < 1.0);
        assert!(filt < raw);
    }

    #[test]
    fn covariance_stays_psd_under_random_cycles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let cfg = KalmanConfig::default();
        let mut s = cfg.initial(Vector4::zeros());
        for _ in 0..10_000 {
            let z = Vector4::from_fn(|_, _| u.sample(&mut rng));
            let present = u.sample(&mut rng) > -0.4;
            s = step(&s, present.then_some(&z), &cfg).unwrap().state;
            assert_eq!(s.p, s.p.transpose());
            assert!(s.p.symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn default_config_valid() {
        assert!(KalmanConfig::default().violations().is_empty());
    }
}
