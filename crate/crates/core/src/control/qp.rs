//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 x' P x + q' x
//!     subject to  A_eq x = b_eq
//!                 lo <= A_box x <= hi     (row-wise)
//! ```
//!
//! with `P` symmetric positive semidefinite. Equalities are eliminated
//! through an SVD-based null-space parametrization; the reduced
//! box-constrained problem is solved by a dual active-set iteration that
//! starts at the unconstrained minimizer and activates violated rows one at
//! a time, solving each working-set subproblem exactly through a Cholesky
//! factorization and a Schur complement. A singular reduced Hessian falls
//! back to a proximal-point wrapper around the same iteration, which keeps
//! every subproblem strictly convex without altering the problem being
//! solved.
//!
//! The solver is deterministic: constraint selection uses fixed tie-breaking
//! and there is no randomized pivoting. Reported KKT residuals (stationarity,
//! primal feasibility, complementarity) are always evaluated on the original
//! problem data.

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::cholesky::{FactorizeC, SolveC};
use ndarray_linalg::UPLO;

use crate::error::{Error, Result};
use crate::numerics;

/// Termination state of a QP solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QpStatus::Optimal => write!(f, "optimal"),
            QpStatus::Infeasible => write!(f, "infeasible"),
            QpStatus::MaxIter => write!(f, "max-iter"),
        }
    }
}

/// A dense QP in standard form.
#[derive(Debug, Clone)]
pub struct DenseQp {
    pub p: Array2<f64>,
    pub q: Array1<f64>,
    pub a_eq: Array2<f64>,
    pub b_eq: Array1<f64>,
    pub a_box: Array2<f64>,
    pub lo: Array1<f64>,
    pub hi: Array1<f64>,
}

impl DenseQp {
    /// A problem with box rows only.
    pub fn boxed(p: Array2<f64>, q: Array1<f64>, a_box: Array2<f64>, lo: Array1<f64>, hi: Array1<f64>) -> Self {
        let n = q.len();
        DenseQp {
            p,
            q,
            a_eq: Array2::zeros((0, n)),
            b_eq: Array1::zeros(0),
            a_box,
            lo,
            hi,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.q.len();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(Error::Shape { context: "qp", details: "P must be n x n".into() });
        }
        if self.a_eq.ncols() != n && self.a_eq.nrows() > 0 {
            return Err(Error::Shape { context: "qp", details: "A_eq width mismatch".into() });
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::Shape { context: "qp", details: "A_eq/b_eq row mismatch".into() });
        }
        if self.a_box.nrows() != self.lo.len() || self.a_box.nrows() != self.hi.len() {
            return Err(Error::Shape { context: "qp", details: "box row mismatch".into() });
        }
        if self.a_box.nrows() > 0 && self.a_box.ncols() != n {
            return Err(Error::Shape { context: "qp", details: "A_box width mismatch".into() });
        }
        for (l, h) in self.lo.iter().zip(self.hi.iter()) {
            if l > h {
                return Err(Error::Param { name: "bounds", details: "lo > hi".into() });
            }
        }
        Ok(())
    }
}

/// Result of a dense QP solve.
#[derive(Debug, Clone)]
pub struct QpOutput {
    pub x: Array1<f64>,
    /// Multipliers of the equality rows.
    pub eq_multipliers: Array1<f64>,
    /// Signed multiplier per box row: positive when the upper bound is
    /// active, negative at the lower bound, zero when inactive.
    pub box_multipliers: Array1<f64>,
    /// `1/2 x' P x + q' x` at the solution.
    pub objective: f64,
    /// Max of the stationarity, primal-feasibility and complementarity
    /// residuals on the original problem.
    pub kkt_residual: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
}

fn lin_err(e: ndarray_linalg::error::LinalgError) -> Error {
    Error::Param { name: "qp", details: format!("linear solve failed: {e}") }
}

/// Dual active-set iteration (Goldfarb–Idnani) on a strictly convex
/// problem with two-sided rows `lo <= C h <= hi`.
///
/// Every row side is handled in the form `n' h >= b` (`+row >= lo`,
/// `-row >= -hi`). Starting from the unconstrained minimizer, the most
/// violated constraint is driven into the active set with full or partial
/// steps; partial steps drop active rows whose multipliers would turn
/// negative. Dual feasibility (`u >= 0`) holds throughout, the iteration is
/// finite for positive definite Hessians, and an unbounded dual step
/// certifies primal infeasibility.
fn active_set_box(
    h_mat: &Array2<f64>,
    c_vec: &Array1<f64>,
    c_rows: &Array2<f64>,
    lo: &Array1<f64>,
    hi: &Array1<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(Array1<f64>, Array1<f64>, QpStatus, usize)> {
    let k_rows = c_rows.nrows();
    let n = c_vec.len();
    let chol = h_mat
        .factorizec(UPLO::Lower)
        .map_err(|e| Error::Param { name: "qp", details: format!("Hessian not positive definite: {e}") })?;
    let mut x = {
        let mut rhs = c_vec.clone();
        rhs.mapv_inplace(|v| -v);
        chol.solvec(&rhs).map_err(lin_err)?
    };
    let scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    let feas_tol = tol.max(1e-12) * scale.max(1.0);

    // Active set: (row, side), signed normal rows, H^-1 normals, multipliers.
    let mut active: Vec<(usize, Side)> = Vec::new();
    let mut normals: Vec<Array1<f64>> = Vec::new();
    let mut hinv_normals: Vec<Array1<f64>> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0usize;
    let mut status = QpStatus::MaxIter;

    let signed_normal = |row: usize, side: Side| -> (Array1<f64>, f64) {
        match side {
            Side::Lower => (c_rows.row(row).to_owned(), lo[row]),
            Side::Upper => (-c_rows.row(row).to_owned(), -hi[row]),
        }
    };

    'outer: while iterations < max_iters {
        iterations += 1;
        // Most violated constraint (n' x >= b form).
        let vals = c_rows.dot(&x);
        let mut worst: Option<(usize, Side, f64)> = None;
        for r in 0..k_rows {
            let is_active = |s: Side| active.iter().any(|(ar, asd)| *ar == r && *asd == s);
            if lo[r].is_finite() && !is_active(Side::Lower) {
                let v = lo[r] - vals[r];
                if v > feas_tol && worst.map_or(true, |(_, _, wv)| v > wv) {
                    worst = Some((r, Side::Lower, v));
                }
            }
            if hi[r].is_finite() && !is_active(Side::Upper) {
                let v = vals[r] - hi[r];
                if v > feas_tol && worst.map_or(true, |(_, _, wv)| v > wv) {
                    worst = Some((r, Side::Upper, v));
                }
            }
        }
        let Some((p_row, p_side, _)) = worst else {
            status = QpStatus::Optimal;
            break;
        };
        let (n_p, b_p) = signed_normal(p_row, p_side);
        let hinv_np = chol.solvec(&n_p).map_err(lin_err)?;
        let mut u_p = 0.0f64;

        // Drive constraint p to satisfaction with full/partial steps.
        loop {
            iterations += 1;
            if iterations > max_iters {
                break 'outer;
            }
            // Dual sensitivity r and primal direction z for the current
            // active set.
            let k = active.len();
            let r_sens = if k > 0 {
                let mut s_mat = Array2::zeros((k, k));
                for i in 0..k {
                    for j in 0..k {
                        s_mat[[i, j]] = normals[i].dot(&hinv_normals[j]);
                    }
                }
                let rhs = Array1::from_shape_fn(k, |i| normals[i].dot(&hinv_np));
                match s_mat.factorizec(UPLO::Lower) {
                    Ok(f) => f.solvec(&rhs).map_err(lin_err)?,
                    Err(_) => {
                        let pinv = numerics::pseudoinverse(s_mat.view(), numerics::RANK_TOL)?;
                        pinv.dot(&rhs)
                    }
                }
            } else {
                Array1::zeros(0)
            };
            let mut z = hinv_np.clone();
            for (j, hn) in hinv_normals.iter().enumerate() {
                z.scaled_add(-r_sens[j], hn);
            }
            let ztn = z.dot(&n_p);
            let z_zero = ztn.abs() <= 1e-12 * (1.0 + n_p.dot(&n_p));

            // Partial step bound from active multipliers.
            let mut t1 = f64::INFINITY;
            let mut drop_idx: Option<usize> = None;
            for j in 0..k {
                if r_sens[j] > 1e-14 {
                    let cand = u[j] / r_sens[j];
                    if cand < t1 {
                        t1 = cand;
                        drop_idx = Some(j);
                    }
                }
            }
            // Full step to make constraint p active.
            let s_p = n_p.dot(&x) - b_p;
            let t2 = if z_zero { f64::INFINITY } else { -s_p / ztn };

            let t = t1.min(t2);
            if !t.is_finite() {
                // No step reduces the violation: the constraints are
                // inconsistent.
                status = QpStatus::Infeasible;
                break 'outer;
            }
            // Dual update (and primal when a primal direction exists).
            if !z_zero {
                x.scaled_add(t, &z);
            }
            for j in 0..k {
                u[j] -= t * r_sens[j];
            }
            u_p += t;
            if t2 <= t1 && !z_zero {
                // Constraint p reached its bound: activate it.
                active.push((p_row, p_side));
                normals.push(n_p);
                hinv_normals.push(hinv_np);
                u.push(u_p);
                continue 'outer;
            }
            // Partial step: drop the blocking constraint and retry.
            let j = drop_idx.expect("finite partial step implies a blocking row");
            active.remove(j);
            normals.remove(j);
            hinv_normals.remove(j);
            u.remove(j);
        }
    }

    let mut signed = Array1::zeros(k_rows);
    for ((row, side), m) in active.iter().zip(u.iter()) {
        // Map back to the convention P x + q + C' mu = 0: positive at the
        // upper bound, negative at the lower bound.
        signed[*row] += match side {
            Side::Upper => *m,
            Side::Lower => -*m,
        };
    }
    Ok((x, signed, status, iterations))
}

/// Box-QP front end that handles a semidefinite Hessian through proximal
/// iterations when a direct factorization is not available.
fn solve_box_qp(
    h_mat: &Array2<f64>,
    c_vec: &Array1<f64>,
    c_rows: &Array2<f64>,
    lo: &Array1<f64>,
    hi: &Array1<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(Array1<f64>, Array1<f64>, QpStatus, usize)> {
    if h_mat.factorizec(UPLO::Lower).is_ok() {
        return active_set_box(h_mat, c_vec, c_rows, lo, hi, tol, max_iters);
    }
    // Proximal point: each subproblem adds rho * I, which is strictly
    // convex; the fixed point solves the original problem.
    let n = c_vec.len();
    let diag_scale = (0..n).map(|i| h_mat[[i, i]].abs()).sum::<f64>() / n.max(1) as f64;
    let rho = 1e-8 * (1.0 + diag_scale);
    let mut h_prox = h_mat.clone();
    for i in 0..n {
        h_prox[[i, i]] += rho;
    }
    let mut x = Array1::zeros(n);
    let mut total_iters = 0usize;
    let mut last = (Array1::zeros(n), Array1::zeros(c_rows.nrows()), QpStatus::MaxIter, 0usize);
    for _ in 0..60 {
        let c_shift = c_vec - &(&x * rho);
        let out = active_set_box(&h_prox, &c_shift, c_rows, lo, hi, tol, max_iters)?;
        total_iters += out.3;
        let delta = (&out.0 - &x).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        x = out.0.clone();
        last = out;
        if delta <= 0.01 * tol * (1.0 + x.iter().map(|v| v.abs()).fold(0.0f64, f64::max)) {
            break;
        }
        if last.2 == QpStatus::Infeasible {
            break;
        }
    }
    Ok((x, last.1, last.2, total_iters))
}

/// Solve a dense convex QP.
///
/// `tol` bounds the reported stationarity, feasibility and complementarity
/// residuals of an `Optimal` result; `max_iters` caps the active-set
/// iterations. Infeasible equality systems and incompatible box activations
/// yield `Infeasible`; hitting the cap yields `MaxIter` with the best
/// iterate found.
pub fn solve_dense_qp(qp: &DenseQp, tol: f64, max_iters: usize) -> Result<QpOutput> {
    qp.validate()?;
    let n = qp.q.len();
    let has_eq = qp.a_eq.nrows() > 0;

    // Equality elimination.
    let (x_part, z_basis) = if has_eq {
        let dec = numerics::svd(qp.a_eq.view())?;
        let r = dec.rank();
        let pinv = numerics::pseudoinverse(qp.a_eq.view(), numerics::RANK_TOL)?;
        let x_p = pinv.dot(&qp.b_eq);
        let resid = qp.a_eq.dot(&x_p) - &qp.b_eq;
        let feas = resid.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let b_scale = 1.0 + qp.b_eq.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        if feas > tol.max(1e-9) * b_scale {
            return Ok(QpOutput {
                x: x_p,
                eq_multipliers: Array1::zeros(qp.a_eq.nrows()),
                box_multipliers: Array1::zeros(qp.a_box.nrows()),
                objective: f64::NAN,
                kkt_residual: feas,
                status: QpStatus::Infeasible,
                iterations: 0,
            });
        }
        let z = numerics::null_space_basis(qp.a_eq.view())?;
        let _ = r;
        (x_p, z)
    } else {
        (Array1::zeros(n), Array2::eye(n))
    };

    let n_free = z_basis.ncols();
    let (x, box_mu, status, iterations) = if n_free == 0 {
        // Fully determined by the equalities.
        (x_part.clone(), Array1::zeros(qp.a_box.nrows()), QpStatus::Optimal, 0)
    } else {
        let h_red = z_basis.t().dot(&qp.p).dot(&z_basis);
        let c_red = z_basis.t().dot(&(qp.p.dot(&x_part) + &qp.q));
        let (c_rows, lo_s, hi_s) = if qp.a_box.nrows() > 0 {
            let shift = qp.a_box.dot(&x_part);
            (
                qp.a_box.dot(&z_basis),
                &qp.lo - &shift,
                &qp.hi - &shift,
            )
        } else {
            (Array2::zeros((0, n_free)), Array1::zeros(0), Array1::zeros(0))
        };
        let (h_sol, mu, status, iters) =
            solve_box_qp(&h_red, &c_red, &c_rows, &lo_s, &hi_s, tol, max_iters)?;
        (&x_part + &z_basis.dot(&h_sol), mu, status, iters)
    };

    // Multipliers for the equality rows from stationarity.
    let grad = qp.p.dot(&x) + &qp.q + &qp.a_box.t().dot(&box_mu);
    let eq_multipliers = if has_eq {
        let rhs = grad.mapv(|v| -v).insert_axis(Axis(1));
        numerics::least_squares(qp.a_eq.t(), rhs.view())?
            .index_axis(Axis(1), 0)
            .to_owned()
    } else {
        Array1::zeros(0)
    };

    let kkt_residual = kkt_residual(qp, &x, &eq_multipliers, &box_mu);
    let objective = 0.5 * x.dot(&qp.p.dot(&x)) + qp.q.dot(&x);
    let status = match status {
        QpStatus::Optimal if kkt_residual > tol => QpStatus::MaxIter,
        s => s,
    };
    Ok(QpOutput {
        x,
        eq_multipliers,
        box_multipliers: box_mu,
        objective,
        kkt_residual,
        status,
        iterations,
    })
}

/// Max of stationarity, primal-feasibility and complementarity residuals.
pub fn kkt_residual(qp: &DenseQp, x: &Array1<f64>, lam: &Array1<f64>, mu: &Array1<f64>) -> f64 {
    let mut grad = qp.p.dot(x) + &qp.q;
    if qp.a_eq.nrows() > 0 {
        grad = grad + qp.a_eq.t().dot(lam);
    }
    if qp.a_box.nrows() > 0 {
        grad = grad + qp.a_box.t().dot(mu);
    }
    let stat = grad.iter().map(|v| v.abs()).fold(0.0f64, f64::max);

    let mut feas = 0.0f64;
    if qp.a_eq.nrows() > 0 {
        let r = qp.a_eq.dot(x) - &qp.b_eq;
        feas = r.iter().map(|v| v.abs()).fold(feas, f64::max);
    }
    let mut compl = 0.0f64;
    if qp.a_box.nrows() > 0 {
        let vals = qp.a_box.dot(x);
        for r in 0..qp.a_box.nrows() {
            feas = feas.max(qp.lo[r] - vals[r]).max(vals[r] - qp.hi[r]);
            if mu[r] > 0.0 {
                compl = compl.max(mu[r] * (qp.hi[r] - vals[r]).abs());
            } else if mu[r] < 0.0 {
                compl = compl.max(-mu[r] * (vals[r] - qp.lo[r]).abs());
            }
        }
    }
    stat.max(feas).max(compl)
}
