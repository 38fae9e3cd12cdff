//! Finite-horizon moment-error MPC condensed into a dense convex QP.
//!
//! The error model is `e(k+1) = e(k) + T_s L u(k)`, stacked over the horizon
//! as `E = Phi e(k) + Gamma U`. Only the first input of the optimal sequence
//! is applied (receding horizon).

pub mod qp;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interaction::{ControlInput, InteractionMatrix};
use crate::ConfigViolation;
pub use qp::{
    kkt_report, solve_qp, solve_qp_with, KktReport, QpError, QpProblem, QpSettings, QpSolution,
    QpStatus, WarmStart,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("sample period must be positive, got {0}")]
    NonPositiveSamplePeriod(f64),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("interaction model is singular or non-finite")]
    SingularModel,
    #[error("invalid MPC configuration: {0:?}")]
    InvalidConfig(Vec<ConfigViolation>),
    #[error(transparent)]
    Solver(#[from] QpError),
}

/// Weights, bounds and constraint switches for one MPC controller.
///
/// Matrices are stored row-major as nested arrays so the struct maps
/// directly onto the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub sample_period: f64,
    pub q: [[f64; 4]; 4],
    pub r: [[f64; 4]; 4],
    pub p_term: [[f64; 4]; 4],
    pub e_min: [f64; 4],
    pub e_max: [f64; 4],
    pub u_min: [f64; 4],
    pub u_max: [f64; 4],
    pub eps_term: [f64; 4],
    pub input_constraints: bool,
    pub state_constraints: bool,
    pub terminal_constraint: bool,
    /// Weight of the slack variables used when the hard problem is infeasible.
    pub slack_weight: f64,
    pub tol: f64,
    pub max_iter: usize,
}

fn diag4(d: [f64; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = d[i];
    }
    m
}

impl Default for MpcConfig {
    fn default() -> Self {
        let q = [10.0, 10.0, 10.0, 5.0];
        Self {
            horizon: 20,
            sample_period: 1.0 / 30.0,
            q: diag4(q),
            r: diag4([1.0; 4]),
            p_term: diag4(q.map(|v| 10.0 * v)),
            e_min: [-2.0, -2.0, -3.0, -std::f64::consts::PI],
            e_max: [2.0, 2.0, 3.0, std::f64::consts::PI],
            u_min: [-1.0, -1.0, -1.0, -0.8],
            u_max: [1.0, 1.0, 1.0, 0.8],
            eps_term: [0.5, 0.5, 1.0, 0.5],
            input_constraints: true,
            state_constraints: true,
            terminal_constraint: true,
            slack_weight: 1e6,
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

pub(crate) fn mat4(m: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| m[i][j])
}

fn is_psd(m: &Matrix4<f64>) -> bool {
    let sym = (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
    sym && m.symmetric_eigen().eigenvalues.min() >= -1e-9
}

impl MpcConfig {
    /// Configuration with all three constraint groups switched off.
    pub fn unconstrained(mut self) -> Self {
        self.input_constraints = false;
        self.state_constraints = false;
        self.terminal_constraint = false;
        self
    }

    pub fn q_mat(&self) -> Matrix4<f64> {
        mat4(&self.q)
    }

    pub fn r_mat(&self) -> Matrix4<f64> {
        mat4(&self.r)
    }

    pub fn p_mat(&self) -> Matrix4<f64> {
        mat4(&self.p_term)
    }

    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        let mut push = |field: &str, msg: String| out.push(ConfigViolation::new(format!("mpc.{field}"), msg));
        if self.horizon < 1 {
            push("horizon", "must be >= 1".into());
        }
        if !(self.sample_period > 0.0) {
            push("sample_period", format!("must be > 0, got {}", self.sample_period));
        }
        for (name, m) in [("q", &self.q), ("r", &self.r), ("p_term", &self.p_term)] {
            let mm = mat4(m);
            if mm.iter().any(|v| !v.is_finite()) || !is_psd(&mm) {
                push(name, "must be finite, symmetric and positive semi-definite".into());
            }
        }
        for i in 0..4 {
            if !(self.e_min[i] < self.e_max[i]) {
                push("e_min", format!("e_min[{i}] = {} must be < e_max[{i}] = {}", self.e_min[i], self.e_max[i]));
            }
            if !(self.u_min[i] < self.u_max[i]) {
                push("u_min", format!("u_min[{i}] = {} must be < u_max[{i}] = {}", self.u_min[i], self.u_max[i]));
            }
            if !(self.eps_term[i] > 0.0) {
                push("eps_term", format!("eps_term[{i}] must be > 0, got {}", self.eps_term[i]));
            }
        }
        if !(self.slack_weight > 0.0) {
            push("slack_weight", "must be > 0".into());
        }
        if !(self.tol > 0.0) {
            push("tol", "must be > 0".into());
        }
        if self.max_iter == 0 {
            push("max_iter", "must be >= 1".into());
        }
        out
    }
}

/// Zero-order-hold discretization of `q_dot = L v`: `A = I`, `B = T_s L`.
pub fn discretize(l: &InteractionMatrix, sample_period: f64) -> Result<(Matrix4<f64>, Matrix4<f64>), MpcError> {
    if !(sample_period > 0.0) || !sample_period.is_finite() {
        return Err(MpcError::NonPositiveSamplePeriod(sample_period));
    }
    Ok((Matrix4::identity(), l.matrix() * sample_period))
}

/// Stacked prediction `E = Phi e(k) + Gamma U`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

impl PredictionMatrices {
    pub fn horizon(&self) -> usize {
        self.phi.nrows() / 4
    }

    pub fn predict(&self, e_k: &Vector4<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.phi * e_k + &self.gamma * u
    }
}

pub fn build_prediction(a: &Matrix4<f64>, b: &Matrix4<f64>, horizon: usize) -> Result<PredictionMatrices, MpcError> {
    if horizon == 0 {
        return Err(MpcError::EmptyHorizon);
    }
    let n = 4 * horizon;
    let mut phi = DMatrix::zeros(n, 4);
    let mut gamma = DMatrix::zeros(n, n);
    // powers[i] = A^i
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(Matrix4::identity());
    for i in 1..=horizon {
        powers.push(a * powers[i - 1]);
    }
    for i in 0..horizon {
        phi.fixed_view_mut::<4, 4>(4 * i, 0).copy_from(&powers[i + 1]);
        for j in 0..=i {
            gamma
                .fixed_view_mut::<4, 4>(4 * i, 4 * j)
                .copy_from(&(powers[i - j] * b));
        }
    }
    Ok(PredictionMatrices { phi, gamma })
}

/// Row ranges of each constraint group inside `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConstraintLayout {
    pub input: (usize, usize),
    pub state: (usize, usize),
    pub terminal: (usize, usize),
}

/// Condensed QP together with the constant part of the cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedMpc {
    pub qp: QpProblem,
    pub layout: ConstraintLayout,
    /// `J = 1/2 U'HU + f'U + constant`.
    pub constant: f64,
}

fn block_diag(blocks: &[Matrix4<f64>]) -> DMatrix<f64> {
    let n = 4 * blocks.len();
    let mut m = DMatrix::zeros(n, n);
    for (i, b) in blocks.iter().enumerate() {
        m.fixed_view_mut::<4, 4>(4 * i, 4 * i).copy_from(b);
    }
    m
}

/// Builds `H = 2 (Gamma' Qbar Gamma + Rbar)`, with `Qbar = diag(Q, .., Q, Q + P_term)`,
/// `f = 2 Gamma' Qbar Phi e_k`, and
/// the inequality rows enabled in `cfg`. The error reference is zero.
pub fn condense(e_k: &Vector4<f64>, pred: &PredictionMatrices, cfg: &MpcConfig) -> Result<CondensedMpc, MpcError> {
    let horizon = pred.horizon();
    if horizon != cfg.horizon || pred.gamma.nrows() != 4 * horizon || pred.gamma.ncols() != 4 * horizon {
        return Err(MpcError::DimensionMismatch(format!(
            "prediction horizon {horizon} vs configured {}",
            cfg.horizon
        )));
    }
    let n = 4 * horizon;
    let (q, r, p) = (cfg.q_mat(), cfg.r_mat(), cfg.p_mat());
    // Q weights every predicted error e(k+1)..e(k+N); P_term is added on top at e(k+N).
    let mut qs = vec![q; horizon];
    qs[horizon - 1] += p;
    let q_bar = block_diag(&qs);
    let r_bar = block_diag(&vec![r; horizon]);

    let gt_q = pred.gamma.transpose() * &q_bar;
    let mut h = (&gt_q * &pred.gamma + r_bar) * 2.0;
    h = (&h + h.transpose()) * 0.5;
    let free = &pred.phi * e_k;
    let f = &gt_q * &free * 2.0;
    let constant = e_k.dot(&(q * e_k)) + free.dot(&(&q_bar * &free));

    let mut g_blocks: Vec<DMatrix<f64>> = Vec::new();
    let mut w_blocks: Vec<DVector<f64>> = Vec::new();
    let mut layout = ConstraintLayout::default();
    let mut row = 0;

    if cfg.input_constraints {
        let eye = DMatrix::<f64>::identity(n, n);
        g_blocks.push(eye.clone());
        g_blocks.push(-eye);
        w_blocks.push(DVector::from_fn(n, |i, _| cfg.u_max[i % 4]));
        w_blocks.push(DVector::from_fn(n, |i, _| -cfg.u_min[i % 4]));
        layout.input = (row, row + 2 * n);
        row += 2 * n;
    }
    if cfg.state_constraints {
        g_blocks.push(pred.gamma.clone());
        g_blocks.push(-pred.gamma.clone());
        w_blocks.push(DVector::from_fn(n, |i, _| cfg.e_max[i % 4] - free[i]));
        w_blocks.push(DVector::from_fn(n, |i, _| free[i] - cfg.e_min[i % 4]));
        layout.state = (row, row + 2 * n);
        row += 2 * n;
    }
    if cfg.terminal_constraint {
        let last = pred.gamma.rows(n - 4, 4).into_owned();
        let free_n = free.rows(n - 4, 4);
        g_blocks.push(last.clone());
        g_blocks.push(-last);
        w_blocks.push(DVector::from_fn(4, |i, _| cfg.eps_term[i] - free_n[i]));
        w_blocks.push(DVector::from_fn(4, |i, _| cfg.eps_term[i] + free_n[i]));
        layout.terminal = (row, row + 8);
        row += 8;
    }

    let mut g = DMatrix::zeros(row, n);
    let mut w = DVector::zeros(row);
    let mut at = 0;
    for (gb, wb) in g_blocks.iter().zip(&w_blocks) {
        g.rows_mut(at, gb.nrows()).copy_from(gb);
        w.rows_mut(at, wb.len()).copy_from(wb);
        at += gb.nrows();
    }

    Ok(CondensedMpc {
        qp: QpProblem::unconstrained(h, f).with_inequalities(g, w),
        layout,
        constant,
    })
}

/// Adds non-negative slack variables to the state and terminal rows: one per
/// feature for the state box and one per feature for the terminal box, each
/// penalized by `weight * (s + s^2)`.
fn soften(c: &CondensedMpc, cfg: &MpcConfig) -> QpProblem {
    let qp = &c.qp;
    let n = qp.num_vars();
    let m = qp.num_inequalities();
    let ns = 8;
    let nt = n + ns;

    let mut h = DMatrix::zeros(nt, nt);
    h.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    let mut f = DVector::zeros(nt);
    f.rows_mut(0, n).copy_from(&qp.f);
    for k in 0..ns {
        h[(n + k, n + k)] = 2.0 * cfg.slack_weight;
        f[n + k] = cfg.slack_weight;
    }

    let mut g = DMatrix::zeros(m + ns, nt);
    g.view_mut((0, 0), (m, n)).copy_from(&qp.g);
    let mut w = DVector::zeros(m + ns);
    w.rows_mut(0, m).copy_from(&qp.w);
    let (s0, s1) = c.layout.state;
    for i in s0..s1 {
        g[(i, n + (i - s0) % 4)] = -1.0;
    }
    let (t0, t1) = c.layout.terminal;
    for i in t0..t1 {
        g[(i, n + 4 + (i - t0) % 4)] = -1.0;
    }
    for k in 0..ns {
        g[(m + k, n + k)] = -1.0;
    }
    QpProblem::unconstrained(h, f).with_inequalities(g, w)
}

/// Output of one receding-horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    /// First input of the optimal sequence.
    pub u: ControlInput,
    pub solution: QpSolution,
    /// Predicted errors `e(k+1) .. e(k+N)` at the returned sequence.
    pub predicted: Vec<Vector4<f64>>,
    /// Full cost including terms independent of `U`.
    pub cost: f64,
}

pub fn mpc_step(e_k: &Vector4<f64>, l: &InteractionMatrix, cfg: &MpcConfig) -> Result<MpcStep, MpcError> {
    mpc_step_warm(e_k, l, cfg, None)
}

/// [`mpc_step`] with an optional solver warm start (for example the previous
/// step's solution shifted by one stage).
pub fn mpc_step_warm(
    e_k: &Vector4<f64>,
    l: &InteractionMatrix,
    cfg: &MpcConfig,
    warm: Option<&WarmStart>,
) -> Result<MpcStep, MpcError> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(MpcError::InvalidConfig(violations));
    }
    if l.matrix().iter().any(|v| !v.is_finite()) || e_k.iter().any(|v| !v.is_finite()) {
        return Err(MpcError::SingularModel);
    }
    let (a, b) = discretize(l, cfg.sample_period)?;
    let pred = build_prediction(&a, &b, cfg.horizon)?;
    let condensed = condense(e_k, &pred, cfg)?;
    let settings = QpSettings {
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        ..QpSettings::default()
    };
    let mut solution = solve_qp_with(&condensed.qp, &settings, warm)?;

    let softenable = cfg.state_constraints || cfg.terminal_constraint;
    if softenable && matches!(solution.status, QpStatus::Infeasible | QpStatus::MaxIterations) {
        let soft = soften(&condensed, cfg);
        let soft_sol = solve_qp_with(&soft, &settings, None)?;
        if soft_sol.status == QpStatus::Optimal {
            let n = condensed.qp.num_vars();
            let m = condensed.qp.num_inequalities();
            solution = QpSolution {
                u: soft_sol.u.rows(0, n).into_owned(),
                objective: condensed.qp.objective(&soft_sol.u.rows(0, n).into_owned()),
                status: QpStatus::SoftenedTerminal,
                kkt_residual: soft_sol.kkt_residual,
                iterations: solution.iterations + soft_sol.iterations,
                lambda: soft_sol.lambda.rows(0, m).into_owned(),
                nu: soft_sol.nu,
            };
        }
    }

    let stacked = pred.predict(e_k, &solution.u);
    let predicted = (0..cfg.horizon)
        .map(|i| stacked.fixed_rows::<4>(4 * i).into_owned())
        .collect();
    let u = ControlInput::from_vector(&solution.u.fixed_rows::<4>(0).into_owned());
    Ok(MpcStep {
        u,
        cost: solution.objective + condensed.constant,
        solution,
        predicted,
    })
}
