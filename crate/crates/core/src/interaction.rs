//! Interaction matrix of the moment features and the classical IBVS law.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::FeatureVector;

/// Above this 1-norm condition estimate the interaction matrix is treated as
/// singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InteractionError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("interaction matrix is numerically singular (condition {0:e})")]
    SingularInteraction(f64),
    #[error("control gain must be positive, got {0}")]
    NonPositiveGain(f64),
}

/// Camera velocity command `[v_x, v_y, v_z, omega_z]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub v_x: f64,
    pub v_y: f64,
    pub v_z: f64,
    pub omega_z: f64,
}

impl ControlInput {
    pub fn new(v_x: f64, v_y: f64, v_z: f64, omega_z: f64) -> Self {
        Self {
            v_x,
            v_y,
            v_z,
            omega_z,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.v_x, self.v_y, self.v_z, self.omega_z)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn translational_norm(&self) -> f64 {
        (self.v_x * self.v_x + self.v_y * self.v_y + self.v_z * self.v_z).sqrt()
    }
}

/// `L = [[1/Z, 0, 0, y_n], [0, 1/Z, 0, -x_n], [0, 0, 1/Z, 0], [0, 0, 0, -1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionMatrix {
    entries: Matrix4<f64>,
}

impl InteractionMatrix {
    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.entries
    }

    /// Feature rate `q_dot = L v`.
    pub fn feature_rate(&self, u: &ControlInput) -> Vector4<f64> {
        self.entries * u.as_vector()
    }

    /// Solves `L x = b` after checking conditioning.
    pub fn solve(&self, b: &Vector4<f64>) -> Result<Vector4<f64>, InteractionError> {
        let lu = self.entries.full_piv_lu();
        let inv = lu.try_inverse();
        let cond = match &inv {
            Some(inv) => one_norm(&self.entries) * one_norm(inv),
            None => f64::INFINITY,
        };
        if !(cond <= MAX_CONDITION) {
            return Err(InteractionError::SingularInteraction(cond));
        }
        lu.solve(b).ok_or(InteractionError::SingularInteraction(cond))
    }
}

fn one_norm(m: &Matrix4<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn interaction_matrix(q: &FeatureVector, z: f64) -> Result<InteractionMatrix, InteractionError> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(InteractionError::NonPositiveDepth(z));
    }
    let inv_z = 1.0 / z;
    #[rustfmt::skip]
    let entries = Matrix4::new(
        inv_z, 0.0,   0.0,   q.y_n,
        0.0,   inv_z, 0.0,   -q.x_n,
        0.0,   0.0,   inv_z, 0.0,
        0.0,   0.0,   0.0,   -1.0,
    );
    Ok(InteractionMatrix { entries })
}

/// Classical IBVS velocity `v_c = -lambda * L^-1 * (q - q_star)`.
pub fn ibvs_law(
    q: &FeatureVector,
    q_star: &FeatureVector,
    l: &InteractionMatrix,
    lambda: f64,
) -> Result<ControlInput, InteractionError> {
    if !(lambda > 0.0) {
        return Err(InteractionError::NonPositiveGain(lambda));
    }
    let e = q.error_from(q_star);
    let x = l.solve(&e)?;
    Ok(ControlInput::from_vector(&(-lambda * x)))
}
