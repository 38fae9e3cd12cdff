//! Dense convex QP solver.
//!
//! Solves `min 1/2 U'HU + f'U  s.t.  G U <= w,  E U = d` with an
//! over-relaxed ADMM (operator-splitting) iteration followed by an active-set
//! polish that solves the equality-constrained KKT system on the detected
//! active set. The polish is what brings KKT residuals down to `1e-6` and
//! below; the ADMM phase only has to identify the active set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest tolerated `max(G U - w)` for a solution reported as optimal.
pub const PRIMAL_FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("tolerance must be positive")]
    InvalidTolerance,
    #[error("problem data contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub w: DVector<f64>,
    pub eq_mat: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl QpProblem {
    /// Problem without constraints.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            g: DMatrix::zeros(0, n),
            w: DVector::zeros(0),
            eq_mat: DMatrix::zeros(0, n),
            d: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, w: DVector<f64>) -> Self {
        self.g = g;
        self.w = w;
        self
    }

    pub fn with_equalities(mut self, e: DMatrix<f64>, d: DVector<f64>) -> Self {
        self.eq_mat = e;
        self.d = d;
        self
    }

    /// Appends the two-sided box `lo <= U <= hi` as inequality rows.
    pub fn with_box(self, lo: &DVector<f64>, hi: &DVector<f64>) -> Self {
        let n = self.f.len();
        let mut g = DMatrix::zeros(2 * n, n);
        let mut w = DVector::zeros(2 * n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            w[i] = hi[i];
            g[(n + i, i)] = -1.0;
            w[n + i] = -lo[i];
        }
        let g_all = stack_rows(&self.g, &g);
        let w_all = stack_vec(&self.w, &w);
        self.with_inequalities(g_all, w_all)
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.g.nrows()
    }

    pub fn num_equalities(&self) -> usize {
        self.eq_mat.nrows()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.f.len();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.g.ncols() != n || self.g.nrows() != self.w.len() {
            return Err(QpError::DimensionMismatch(format!(
                "G is {}x{} with {} bounds",
                self.g.nrows(),
                self.g.ncols(),
                self.w.len()
            )));
        }
        if self.eq_mat.ncols() != n || self.eq_mat.nrows() != self.d.len() {
            return Err(QpError::DimensionMismatch(format!(
                "E is {}x{} with {} targets",
                self.eq_mat.nrows(),
                self.eq_mat.ncols(),
                self.d.len()
            )));
        }
        let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
        if !(finite(self.h.as_slice())
            && finite(self.f.as_slice())
            && finite(self.g.as_slice())
            && finite(self.w.as_slice())
            && finite(self.eq_mat.as_slice())
            && finite(self.d.as_slice()))
        {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }
}

pub(crate) fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols().max(b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), n);
    if a.nrows() > 0 {
        out.rows_mut(0, a.nrows()).copy_from(a);
    }
    if b.nrows() > 0 {
        out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    }
    out
}

pub(crate) fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    /// Optimal for the problem with slackened state/terminal rows.
    SoftenedTerminal,
    Infeasible,
    /// Iteration budget exhausted; the best iterate is returned.
    MaxIterations,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::SoftenedTerminal => "softened_terminal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIterations => "max_iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Multipliers of `G U <= w` (non-negative at optimality).
    pub lambda: DVector<f64>,
    /// Multipliers of `E U = d`.
    pub nu: DVector<f64>,
}

/// Individual KKT residual components, all in infinity norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_report(qp: &QpProblem, u: &DVector<f64>, lambda: &DVector<f64>, nu: &DVector<f64>) -> KktReport {
    let mut grad = &qp.h * u + &qp.f;
    if qp.num_inequalities() > 0 {
        grad += qp.g.transpose() * lambda;
    }
    if qp.num_equalities() > 0 {
        grad += qp.eq_mat.transpose() * nu;
    }
    let slack = if qp.num_inequalities() > 0 {
        &qp.g * u - &qp.w
    } else {
        DVector::zeros(0)
    };
    let eq_res = if qp.num_equalities() > 0 {
        (&qp.eq_mat * u - &qp.d).amax()
    } else {
        0.0
    };
    let primal = slack.iter().fold(eq_res, |m, s| m.max(*s));
    let dual = lambda.iter().fold(0.0_f64, |m, l| m.max(-l));
    let complementarity = lambda
        .iter()
        .zip(slack.iter())
        .fold(0.0_f64, |m, (l, s)| m.max((l * s).abs()));
    KktReport {
        stationarity: grad.amax(),
        primal,
        dual,
        complementarity,
    }
}

/// ADMM and polish parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in `(0, 2)`.
    pub alpha: f64,
    pub check_every: usize,
    pub max_polish_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 10_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            check_every: 10,
            max_polish_iter: 200,
        }
    }
}

/// Optional starting point for [`solve_qp_with`].
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub u: Option<DVector<f64>>,
    pub lambda: Option<DVector<f64>>,
}

pub fn solve_qp(qp: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    let settings = QpSettings {
        tol,
        max_iter,
        ..QpSettings::default()
    };
    solve_qp_with(qp, &settings, None)
}

pub fn solve_qp_with(
    qp: &QpProblem,
    settings: &QpSettings,
    warm: Option<&WarmStart>,
) -> Result<QpSolution, QpError> {
    qp.validate()?;
    if !(settings.tol > 0.0) {
        return Err(QpError::InvalidTolerance);
    }
    let m_in = qp.num_inequalities();
    let m_eq = qp.num_equalities();

    if m_in + m_eq == 0 {
        return Ok(solve_unconstrained(qp, settings.tol));
    }
    let sol = Admm::new(qp, settings, warm).run()?;
    if sol.status == QpStatus::Optimal {
        return Ok(sol);
    }
    // Badly scaled problems (large penalty weights) can stall ADMM; strictly
    // convex ones are then solved exactly by the dual active-set method.
    Ok(dual_active_set(qp, settings).unwrap_or(sol))
}

/// Goldfarb-Idnani dual active-set method for strictly convex `H`.
/// Returns `None` when `H` is not positive definite or the equality rows are
/// dependent.
fn dual_active_set(qp: &QpProblem, settings: &QpSettings) -> Option<QpSolution> {
    let n = qp.num_vars();
    let m_in = qp.num_inequalities();
    let m_eq = qp.num_equalities();
    let chol = qp.h.clone().cholesky()?;

    // Constraints in `n^T x >= b` form; equalities carry free multipliers.
    let normal = |i: usize| -> DVector<f64> {
        if i < m_in {
            -qp.g.row(i).transpose()
        } else {
            qp.eq_mat.row(i - m_in).transpose()
        }
    };
    let rhs = |i: usize| if i < m_in { -qp.w[i] } else { qp.d[i - m_in] };

    let mut x = chol.solve(&(-&qp.f));
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut hinv_n: Vec<DVector<f64>> = Vec::new();

    // Directions for adding constraint `np`: dual step `r`, primal step `z`.
    let directions = |active: &[usize], hinv_n: &[DVector<f64>], np: &DVector<f64>| {
        let h_np = chol.solve(np);
        if active.is_empty() {
            return Some((DVector::zeros(0), h_np.clone(), h_np));
        }
        let k = active.len();
        let mut m = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (a, &i) in active.iter().enumerate() {
            let ni = normal(i);
            for b in 0..k {
                m[(a, b)] = ni.dot(&hinv_n[b]);
            }
            rhs[a] = ni.dot(&h_np);
        }
        let r = m.lu().solve(&rhs)?;
        let mut z = h_np.clone();
        for (b, col) in hinv_n.iter().enumerate() {
            z.axpy(-r[b], col, 1.0);
        }
        Some((r, z, h_np))
    };

    for j in 0..m_eq {
        let i = m_in + j;
        let mut np = normal(i);
        let mut s = np.dot(&x) - rhs(i);
        if s > 0.0 {
            np = -np;
            s = -s;
        }
        let (r, z, h_np) = directions(&active, &hinv_n, &np)?;
        let zn = z.dot(&np);
        if !(zn > 1e-12 * np.dot(&h_np)) {
            return None;
        }
        let t = -s / zn;
        x.axpy(t, &z, 1.0);
        for (a, u) in mult.iter_mut().enumerate() {
            *u -= t * r[a];
        }
        // Store with the original orientation.
        let sign = if np.dot(&normal(i)) > 0.0 { 1.0 } else { -1.0 };
        active.push(i);
        mult.push(sign * t);
        hinv_n.push(chol.solve(&normal(i)));
    }

    let max_iter = 10 * (n + m_in + m_eq).max(10);
    let mut iterations = 0;
    let mut infeasible = false;
    'outer: while iterations < max_iter {
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..m_in {
            if active.contains(&i) {
                continue;
            }
            let s = normal(i).dot(&x) - rhs(i);
            let thresh = -PRIMAL_FEASIBILITY_TOL * 1e-3 * (1.0 + qp.w[i].abs());
            if s < thresh && pick.is_none_or(|(_, b)| s < b) {
                pick = Some((i, s));
            }
        }
        let Some((p, _)) = pick else { break };
        let np = normal(p);
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                break 'outer;
            }
            let (r, z, h_np) = directions(&active, &hinv_n, &np)?;
            let s_p = np.dot(&x) - rhs(p);
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (a, &i) in active.iter().enumerate() {
                if i < m_in && r[a] > 1e-14 {
                    let t = mult[a] / r[a];
                    if t < t1 {
                        t1 = t;
                        drop = Some(a);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if zn > 1e-12 * np.dot(&h_np) { (-s_p / zn).max(0.0) } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                infeasible = true;
                break 'outer;
            }
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            for (a, u) in mult.iter_mut().enumerate() {
                *u -= t * r[a];
            }
            u_p += t;
            if t2 <= t1 {
                active.push(p);
                mult.push(u_p);
                hinv_n.push(h_np);
                break;
            }
            let a = drop.expect("finite t1 has a blocking constraint");
            active.remove(a);
            mult.remove(a);
            hinv_n.remove(a);
        }
    }

    let pack = |u: DVector<f64>, lambda: DVector<f64>, nu: DVector<f64>, status| {
        let rep = kkt_report(qp, &u, &lambda, &nu);
        let status = match status {
            QpStatus::Optimal if !(rep.max() <= settings.tol && rep.primal <= PRIMAL_FEASIBILITY_TOL) => {
                QpStatus::MaxIterations
            }
            s => s,
        };
        QpSolution {
            objective: qp.objective(&u),
            u,
            status,
            kkt_residual: rep.max(),
            iterations,
            lambda,
            nu,
        }
    };

    let mut lambda = DVector::zeros(m_in);
    let mut nu = DVector::zeros(m_eq);
    for (a, &i) in active.iter().enumerate() {
        if i < m_in {
            lambda[i] = mult[a].max(0.0);
        } else {
            nu[i - m_in] = -mult[a];
        }
    }
    if infeasible {
        return Some(pack(x, lambda, nu, QpStatus::Infeasible));
    }
    let raw = pack(x, lambda, nu, QpStatus::Optimal);
    if raw.status == QpStatus::Optimal {
        return Some(raw);
    }
    // Re-solve the final active set directly to remove accumulated drift.
    let mask: Vec<bool> = (0..m_in).map(|i| active.contains(&i)).collect();
    let refined = solve_eqp(qp, &mask).map(|(u, l, nu)| pack(u, l.map(|v| v.max(0.0)), nu, QpStatus::Optimal));
    match refined {
        Some(r) if r.kkt_residual < raw.kkt_residual => Some(r),
        _ => Some(raw),
    }
}

fn solve_unconstrained(qp: &QpProblem, tol: f64) -> QpSolution {
    let n = qp.num_vars();
    let rhs = -&qp.f;
    let u = match qp.h.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            // Singular H: minimum-norm least-squares stationary point.
            let svd = qp.h.clone().svd(true, true);
            svd.solve(&rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(n))
        }
    };
    let lambda = DVector::zeros(0);
    let nu = DVector::zeros(0);
    let report = kkt_report(qp, &u, &lambda, &nu);
    let status = if report.max() <= tol {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIterations
    };
    QpSolution {
        objective: qp.objective(&u),
        u,
        status,
        kkt_residual: report.max(),
        iterations: 0,
        lambda,
        nu,
    }
}

struct Admm<'a> {
    qp: &'a QpProblem,
    s: QpSettings,
    a: DMatrix<f64>,
    at: DMatrix<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    rho: DVector<f64>,
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

impl<'a> Admm<'a> {
    fn new(qp: &'a QpProblem, s: &QpSettings, warm: Option<&WarmStart>) -> Self {
        let n = qp.num_vars();
        let (m_in, m_eq) = (qp.num_inequalities(), qp.num_equalities());
        let m = m_in + m_eq;
        let a = stack_rows(&qp.g, &qp.eq_mat);
        let mut lo = DVector::from_element(m, f64::NEG_INFINITY);
        let mut hi = DVector::zeros(m);
        hi.rows_mut(0, m_in).copy_from(&qp.w);
        lo.rows_mut(m_in, m_eq).copy_from(&qp.d);
        hi.rows_mut(m_in, m_eq).copy_from(&qp.d);

        let mut rho = DVector::from_element(m, s.rho);
        rho.rows_mut(m_in, m_eq).fill(s.rho * 1e3);

        let x = warm
            .and_then(|w| w.u.clone())
            .filter(|u| u.len() == n)
            .unwrap_or_else(|| DVector::zeros(n));
        let mut y = DVector::zeros(m);
        if let Some(l) = warm.and_then(|w| w.lambda.as_ref()).filter(|l| l.len() == m_in) {
            y.rows_mut(0, m_in).copy_from(l);
        }
        let z = clamp(&(&a * &x), &lo, &hi);
        Self {
            at: a.transpose(),
            qp,
            s: *s,
            a,
            lo,
            hi,
            rho,
            x,
            z,
            y,
        }
    }

    fn factor(&self) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let n = self.x.len();
        let mut k = self.qp.h.clone() + DMatrix::identity(n, n) * self.s.sigma;
        let mut ra = self.a.clone();
        for (i, mut row) in ra.row_iter_mut().enumerate() {
            row *= self.rho[i];
        }
        k += &self.at * ra;
        k.cholesky()
    }

    fn run(mut self) -> Result<QpSolution, QpError> {
        let n = self.x.len();
        let m_in = self.qp.num_inequalities();
        let mut chol = match self.factor() {
            Some(c) => c,
            None => return Err(QpError::DimensionMismatch("KKT matrix not positive definite; H must be PSD".into())),
        };
        let mut eps = 1e-4;
        let mut best: Option<QpSolution> = None;
        let mut y_prev = self.y.clone();
        let alpha = self.s.alpha;

        let mut iter = 0;
        while iter < self.s.max_iter {
            iter += 1;
            let rhs = &self.x * self.s.sigma - &self.qp.f
                + &self.at * (self.rho.component_mul(&self.z) - &self.y);
            let x_tilde = chol.solve(&rhs);
            let z_tilde = &self.a * &x_tilde;
            self.x = &x_tilde * alpha + &self.x * (1.0 - alpha);
            let z_relaxed = &z_tilde * alpha + &self.z * (1.0 - alpha);
            let z_new = clamp(&(&z_relaxed + self.y.component_div(&self.rho)), &self.lo, &self.hi);
            self.y += self.rho.component_mul(&(&z_relaxed - &z_new));
            self.z = z_new;

            if iter % self.s.check_every != 0 && iter != self.s.max_iter {
                continue;
            }

            let ax = &self.a * &self.x;
            let r_prim = (&ax - &self.z).amax();
            let hx = &self.qp.h * &self.x;
            let aty = &self.at * &self.y;
            let r_dual = (&hx + &self.qp.f + &aty).amax();

            let dy = &self.y - &y_prev;
            y_prev = self.y.clone();
            if self.primal_infeasible(&dy) {
                let u = self.x.clone();
                let lambda = self.y.rows(0, m_in).into_owned();
                let nu = self.y.rows(m_in, self.y.len() - m_in).into_owned();
                let rep = kkt_report(self.qp, &u, &lambda, &nu);
                return Ok(QpSolution {
                    objective: self.qp.objective(&u),
                    u,
                    status: QpStatus::Infeasible,
                    kkt_residual: rep.max(),
                    iterations: iter,
                    lambda,
                    nu,
                });
            }

            let scale_p = ax.amax().max(self.z.amax()).max(1.0);
            let scale_d = hx.amax().max(aty.amax()).max(self.qp.f.amax()).max(1.0);
            if r_prim <= eps * scale_p && r_dual <= eps * scale_d {
                if let Some(sol) = self.polish(iter) {
                    return Ok(sol);
                }
                eps = (eps * 1e-2).max(1e-12);
            }
            if best.as_ref().is_none_or(|b| r_prim.max(r_dual) < b.kkt_residual) {
                let u = self.x.clone();
                let lambda = self.y.rows(0, m_in).map(|v| v.max(0.0));
                let nu = self.y.rows(m_in, self.y.len() - m_in).into_owned();
                let rep = kkt_report(self.qp, &u, &lambda, &nu);
                best = Some(QpSolution {
                    objective: self.qp.objective(&u),
                    u,
                    status: QpStatus::MaxIterations,
                    kkt_residual: rep.max(),
                    iterations: iter,
                    lambda,
                    nu,
                });
            }

            // Residual-balancing step-size update.
            if iter % (self.s.check_every * 5) == 0 {
                let rel_p = r_prim / scale_p;
                let rel_d = r_dual / scale_d;
                if rel_p > 0.0 && rel_d > 0.0 {
                    let ratio = (rel_p / rel_d).sqrt().clamp(1e-3, 1e3);
                    if !(0.2..=5.0).contains(&ratio) {
                        self.rho *= ratio;
                        self.rho.iter_mut().for_each(|r| *r = r.clamp(1e-6, 1e9));
                        chol = self.factor().expect("regularized KKT matrix is positive definite");
                    }
                }
            }
        }

        if let Some(sol) = self.polish(iter) {
            return Ok(sol);
        }
        let mut sol = best.unwrap_or_else(|| QpSolution {
            objective: self.qp.objective(&self.x),
            u: self.x.clone(),
            status: QpStatus::MaxIterations,
            kkt_residual: f64::INFINITY,
            iterations: iter,
            lambda: DVector::zeros(m_in),
            nu: DVector::zeros(self.qp.num_equalities()),
        });
        sol.iterations = iter;
        debug_assert_eq!(sol.u.len(), n);
        Ok(sol)
    }

    fn primal_infeasible(&self, dy: &DVector<f64>) -> bool {
        let norm = dy.amax();
        if norm < 1e-12 {
            return false;
        }
        let eps = 1e-6 * norm;
        if (&self.at * dy).amax() > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let v = dy[i];
            if v > eps {
                if !self.hi[i].is_finite() {
                    return false;
                }
                support += self.hi[i] * v;
            } else if v < -eps {
                if !self.lo[i].is_finite() {
                    return false;
                }
                support += self.lo[i] * v;
            }
        }
        support < -eps
    }

    /// Active-set refinement seeded by the current ADMM iterate.
    fn polish(&self, iterations: usize) -> Option<QpSolution> {
        let qp = self.qp;
        let m_in = qp.num_inequalities();
        let gx = &qp.g * &self.x;
        let mut active: Vec<bool> = (0..m_in)
            .map(|i| self.y[i] > 1e-8 || qp.w[i] - gx[i] < 1e-7 * (1.0 + qp.w[i].abs()))
            .collect();

        for _ in 0..self.s.max_polish_iter {
            let (u, lambda, nu) = solve_eqp(qp, &active)?;
            let slack = &qp.g * &u - &qp.w;
            let viol = (0..m_in)
                .filter(|&i| !active[i])
                .map(|i| (i, slack[i]))
                .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
                    Some((_, best)) if best >= s => acc,
                    _ => Some((i, s)),
                });
            if let Some((i, s)) = viol {
                if s > PRIMAL_FEASIBILITY_TOL * 0.1 * (1.0 + qp.w[i].abs()) {
                    active[i] = true;
                    continue;
                }
            }
            let neg = (0..m_in)
                .filter(|&i| active[i])
                .map(|i| (i, lambda[i]))
                .fold(None, |acc: Option<(usize, f64)>, (i, l)| match acc {
                    Some((_, best)) if best <= l => acc,
                    _ => Some((i, l)),
                });
            if let Some((i, l)) = neg {
                if l < -1e-12 {
                    active[i] = false;
                    continue;
                }
            }
            let lambda = lambda.map(|l| l.max(0.0));
            let rep = kkt_report(qp, &u, &lambda, &nu);
            if rep.max() <= self.s.tol && rep.primal <= PRIMAL_FEASIBILITY_TOL {
                return Some(QpSolution {
                    objective: qp.objective(&u),
                    u,
                    status: QpStatus::Optimal,
                    kkt_residual: rep.max(),
                    iterations,
                    lambda,
                    nu,
                });
            }
            return None;
        }
        None
    }
}

fn clamp(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        v.len(),
        v.iter().zip(lo.iter().zip(hi.iter())).map(|(x, (l, h))| x.max(*l).min(*h)),
    )
}

/// Solves the KKT system with inequality rows in `active` treated as
/// equalities. Returns the primal point and full-length multiplier vectors.
fn solve_eqp(
    qp: &QpProblem,
    active: &[bool],
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = qp.num_vars();
    let m_eq = qp.num_equalities();
    let rows: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    let k = rows.len() + m_eq;
    let dim = n + k;

    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&qp.f));
    for (r, &i) in rows.iter().enumerate() {
        let row = qp.g.row(i);
        kkt.view_mut((n + r, 0), (1, n)).copy_from(&row);
        kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.transpose());
        rhs[n + r] = qp.w[i];
    }
    for j in 0..m_eq {
        let row = qp.eq_mat.row(j);
        let r = rows.len() + j;
        kkt.view_mut((n + r, 0), (1, n)).copy_from(&row);
        kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.transpose());
        rhs[n + r] = qp.d[j];
    }

    // Quasi-definite regularization keeps the factorization valid when the
    // active rows are linearly dependent; iterative refinement against the
    // exact matrix removes its bias.
    // The dual shift is scaled inversely to H so refinement still contracts
    // when H carries large penalty weights.
    let h_scale = 1.0 + qp.h.amax();
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += 1e-10 * h_scale;
    }
    for i in n..dim {
        reg[(i, i)] -= 1e-10 / h_scale;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..30 {
        let r = &rhs - &kkt * &sol;
        if r.amax() <= 1e-14 * (1.0 + rhs.amax()) {
            break;
        }
        sol += lu.solve(&r)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let u = sol.rows(0, n).into_owned();
    let mut lambda = DVector::zeros(active.len());
    for (r, &i) in rows.iter().enumerate() {
        lambda[i] = sol[n + r];
    }
    let nu = sol.rows(n + rows.len(), m_eq).into_owned();
    Some((u, lambda, nu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn clipped_scalar_optimum() {
        // min 1/2 u^2 - 2u, -1 <= u <= 1
        let qp = QpProblem::unconstrained(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -2.0))
            .with_box(&DVector::from_element(1, -1.0), &DVector::from_element(1, 1.0));
        let sol = solve_qp(&qp, 1e-8, 1000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.u[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.lambda[0], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn symmetric_halfspace() {
        // H = I, f = 0, u1 + u2 >= 1  <=>  -u1 - u2 <= -1
        let qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2))
            .with_inequalities(DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]), DVector::from_element(1, -1.0));
        let sol = solve_qp(&qp, 1e-8, 1000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.u[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sol.u[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn equality_constrained() {
        // min 1/2|u|^2 s.t. u1 + 2 u2 = 5 -> u = (1, 2)
        let qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2))
            .with_equalities(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), DVector::from_element(1, 5.0));
        let sol = solve_qp(&qp, 1e-8, 1000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.u[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.u[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn detects_infeasibility() {
        // u <= -1 and u >= 1
        let qp = QpProblem::unconstrained(DMatrix::identity(1, 1), DVector::zeros(1)).with_inequalities(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_row_slice(&[-1.0, -1.0]),
        );
        let sol = solve_qp(&qp, 1e-8, 5000).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn unconstrained_direct_solve() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = DVector::from_row_slice(&[1.0, -1.0]);
        let sol = solve_qp(&QpProblem::unconstrained(h.clone(), f.clone()), 1e-10, 10).unwrap();
        assert_relative_eq!(&h * &sol.u, -f, epsilon = 1e-12);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(3));
        assert!(matches!(solve_qp(&qp, 1e-6, 10), Err(QpError::DimensionMismatch(_))));
        let ok = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
        assert_eq!(solve_qp(&ok, 0.0, 10), Err(QpError::InvalidTolerance));
    }

    #[test]
    fn psd_hessian_with_box() {
        // Rank-one H; linear term pushes u2 to its bound.
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let f = DVector::from_row_slice(&[-0.5, -1.0]);
        let qp = QpProblem::unconstrained(h, f)
            .with_box(&DVector::from_element(2, -1.0), &DVector::from_element(2, 1.0));
        let sol = solve_qp(&qp, 1e-8, 5000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.u[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sol.u[1], 1.0, epsilon = 1e-9);
    }
}
