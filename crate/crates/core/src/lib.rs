//! Moment-based image visual servoing with a terminal-constraint MPC and a
//! Kalman filter that bridges feature dropouts.
//!
//! Modules, bottom-up:
//! - [`moments`]: image moments and the normalized feature vector,
//! - [`interaction`]: interaction matrix and classical IBVS law,
//! - [`mpc`]: condensed MPC and the dense QP solver behind it,
//! - [`kalman`]: feature-space Kalman filter,
//! - [`simworld`]: virtual camera closed loop and trial metrics.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod interaction;
pub mod kalman;
pub mod moments;
pub mod mpc;
pub mod simworld;

use serde::{Deserialize, Serialize};

pub use interaction::{ibvs_law, interaction_matrix, ControlInput, InteractionMatrix};
pub use kalman::{KalmanConfig, KalmanState};
pub use moments::{feature_vector, polygon_moments, ConvexPolygon, FeatureVector, MomentSet};
pub use mpc::{mpc_step, MpcConfig, QpProblem, QpSolution, QpStatus};
pub use simworld::{run_trial, ControllerKind, Scenario, TrialResult};

/// One failed configuration invariant, keyed by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigViolation {
    pub field: String,
    pub message: String,
}

impl ConfigViolation {
    pub fn new(field: impl Into<String>, message: String) -> Self {
        Self {
            field: field.into(),
            message,
        }
    }
}

impl std::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}
