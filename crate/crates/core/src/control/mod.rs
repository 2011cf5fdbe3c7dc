//! Receding-horizon control on top of the data-driven representations.
//!
//! The online problem: given the most recent input/output window, pick the
//! future CAV accelerations minimizing a weighted tracking cost subject to
//! acceleration and spacing limits. Two predictors back the same problem
//! shape: the dictionary-free trajectory library ([`DfkController`]) and
//! the lifted parametric model ([`EdmdController`]). An OVM-driven variant
//! ([`HdvController`]) closes the loop with human car-following behavior
//! for baselines.
//!
//! For the library predictor the combination vector `g` has ~1100 entries,
//! but on the constraint manifold the future outputs are an affine function
//! of the future CAV accelerations alone. Both controllers therefore
//! condense to a strictly convex QP in the `N` future accelerations, which
//! the dense active-set solver handles in microseconds; the full-space
//! problem ([`assemble_qp`] / [`solve_qp`]) remains available and the two
//! routes agree (see tests).
//!
//! The head-vehicle velocity is exogenous: over the prediction horizon it
//! is held constant at its last measured value, entering the full-space
//! problem as a separate equality block and the condensed problem through
//! the affine offset.

pub mod qp;

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{EdmdModel, KoopmanRepresentation};
use crate::numerics::{self, vstack};
use crate::traffic::{self, ControlInput, OvmParams, TrafficState, Trajectory};
pub use qp::{DenseQp, QpStatus};

/// Reference policy for the tracking cost.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum ReferencePolicy {
    /// Fixed spacing and velocity reference.
    Fixed { s_r: f64, v_r: f64 },
    /// Fixed spacing reference; the velocity reference is the mean of the
    /// head-vehicle velocities over the measurement window.
    FollowHead { s_r: f64 },
}

/// Weights, limits and horizon of the online problem.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Prediction horizon (steps).
    pub n_future: usize,
    /// Velocity-error weight (per vehicle, per step).
    pub q_v: f64,
    /// Spacing-error weight (per vehicle, per step).
    pub w_s: f64,
    /// Input weight on the CAV acceleration channel.
    pub r_weight: f64,
    /// CAV acceleration bounds, m/s^2.
    pub a_min: f64,
    pub a_max: f64,
    /// CAV spacing bounds, m.
    pub s_min: f64,
    pub s_max: f64,
    pub reference: ReferencePolicy,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            n_future: 50,
            q_v: 1.0,
            w_s: 0.5,
            r_weight: 0.1,
            a_min: -5.0,
            a_max: 2.0,
            s_min: 5.0,
            s_max: 40.0,
            reference: ReferencePolicy::Fixed { s_r: 20.0, v_r: 15.0 },
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_min < self.a_max) {
            return Err(Error::Param { name: "a_min", details: "need a_min < a_max".into() });
        }
        if !(self.s_min < self.s_max) {
            return Err(Error::Param { name: "s_min", details: "need s_min < s_max".into() });
        }
        if self.q_v < 0.0 || self.w_s < 0.0 || self.r_weight < 0.0 {
            return Err(Error::Param { name: "weights", details: "must be non-negative".into() });
        }
        if self.n_future < 1 {
            return Err(Error::Param { name: "n_future", details: "must be at least 1".into() });
        }
        Ok(())
    }

    /// Per-sample output weight vector: `w_s` on spacing components, `q_v`
    /// on velocity components.
    pub fn output_weights(&self, p: usize) -> Array1<f64> {
        Array1::from_shape_fn(p, |j| if j % 2 == 0 { self.w_s } else { self.q_v })
    }

    /// Stacked reference over the horizon: every vehicle at `(s_r, v_r)`.
    pub fn stacked_reference(&self, p: usize, s_r: f64, v_r: f64) -> Array1<f64> {
        Array1::from_shape_fn(p * self.n_future, |j| if j % 2 == 0 { s_r } else { v_r })
    }
}

/// Project a stacked initial window `col(u_ini, y_ini)` onto the range of
/// the representation's past rows `col(U_P, Y_P*)`.
///
/// Keeps the online equality block consistent even when the measured window
/// is not exactly reproducible by the library; the projection is orthogonal
/// and idempotent.
pub fn project_initial(rep: &KoopmanRepresentation, w_ini: &Array1<f64>) -> Result<Array1<f64>> {
    let expect = (rep.m + rep.p) * rep.t_ini;
    if w_ini.len() != expect {
        return Err(Error::Shape {
            context: "project_initial",
            details: format!("window length {} != {expect}", w_ini.len()),
        });
    }
    let q = &rep.init_projector;
    Ok(q.dot(&q.t().dot(w_ini)))
}

/// The assembled full-space problem in the combination vector `g`.
///
/// Cost: `g' H g + l' g + const` with `H = Y_F*' Q Y_F* + U_F' R U_F`
/// exactly (R acts on the CAV-acceleration components only; there is no
/// `g` penalty and no slack on the initial window). Equalities split into
/// the past-window block `col(U_P, Y_P*) g = proj(w_ini)` and the
/// head-velocity forecast block pinning the exogenous input channel.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub hessian: Array2<f64>,
    pub linear: Array1<f64>,
    pub constant: f64,
    /// `col(U_P, Y_P*) g = proj(w_ini)`.
    pub past_equality: (Array2<f64>, Array1<f64>),
    /// Head-velocity rows of `U_F` pinned to the constant forecast.
    pub forecast_equality: (Array2<f64>, Array1<f64>),
    /// Box rows: the CAV-acceleration rows of `U_F`, then the CAV-spacing
    /// rows of `Y_F*`.
    pub box_rows: Array2<f64>,
    pub box_lo: Array1<f64>,
    pub box_hi: Array1<f64>,
    /// Readout maps for recovering `u` and `y` from `g`.
    pub u_future: Array2<f64>,
    pub y_future: Array2<f64>,
    /// Stacked output reference.
    pub y_reference: Array1<f64>,
    /// Output weights tiled over the horizon.
    pub weights: Array1<f64>,
    pub r_weight: f64,
}

/// Solution of the online problem.
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Library combination vector.
    pub g: Array1<f64>,
    /// Future input sequence (both channels, stacked per step).
    pub u_star: Array1<f64>,
    /// Predicted future outputs.
    pub y_star: Array1<f64>,
    /// Tracking cost `||y - y_r||_Q^2 + ||u1||_R^2` at the solution.
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

/// Indices of the CAV-acceleration rows within the stacked future inputs.
fn u1_row_indices(m: usize, n: usize) -> Vec<usize> {
    (0..n).map(|j| j * m).collect()
}

/// Indices of the head-velocity rows within the stacked future inputs.
fn v0_row_indices(m: usize, n: usize) -> Vec<usize> {
    (0..n).map(|j| j * m + 1).collect()
}

/// Indices of the CAV-spacing rows within the stacked future outputs.
fn s1_row_indices(p: usize, n: usize) -> Vec<usize> {
    (0..n).map(|j| j * p).collect()
}

fn select_rows(mat: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), mat.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&mat.row(r));
    }
    out
}

/// Mean of the head-velocity entries of the stacked past inputs.
fn window_head_stats(w_ini: &Array1<f64>, m: usize, t_ini: usize) -> (f64, f64) {
    let mut sum = 0.0;
    for k in 0..t_ini {
        sum += w_ini[k * m + 1];
    }
    let last = w_ini[(t_ini - 1) * m + 1];
    (last, sum / t_ini as f64)
}

/// Assemble the full-space problem from the representation, the
/// configuration and the stacked initial window `col(u_ini, y_ini)`.
///
/// The head-velocity forecast and, under [`ReferencePolicy::FollowHead`],
/// the velocity reference are derived from the window's input part.
pub fn assemble_qp(
    rep: &KoopmanRepresentation,
    cfg: &MpcConfig,
    w_ini: &Array1<f64>,
) -> Result<MpcProblem> {
    cfg.validate()?;
    if cfg.n_future != rep.n_future {
        return Err(Error::Param {
            name: "n_future",
            details: format!(
                "config horizon {} != representation horizon {}",
                cfg.n_future, rep.n_future
            ),
        });
    }
    if rep.m != 2 {
        return Err(Error::Param {
            name: "rep",
            details: "the platoon controller expects two input channels".into(),
        });
    }
    let p = rep.p;
    let n = rep.n_future;
    let w = rep.width();

    let proj = project_initial(rep, w_ini)?;
    let (v0_last, v0_mean) = window_head_stats(w_ini, rep.m, rep.t_ini);
    let (s_r, v_r) = match cfg.reference {
        ReferencePolicy::Fixed { s_r, v_r } => (s_r, v_r),
        ReferencePolicy::FollowHead { s_r } => (s_r, v0_mean),
    };
    let y_r = cfg.stacked_reference(p, s_r, v_r);
    let weights = {
        let per = cfg.output_weights(p);
        Array1::from_shape_fn(p * n, |j| per[j % p])
    };

    let u1_rows = u1_row_indices(rep.m, n);
    let v0_rows = v0_row_indices(rep.m, n);
    let s_rows = s1_row_indices(p, n);

    // Hessian: Y_F*' Q Y_F* + U_F' R U_F with R supported on the
    // CAV-acceleration rows only.
    let wy = {
        let mut t = rep.y_future_star.clone();
        for (j, mut row) in t.axis_iter_mut(Axis(0)).enumerate() {
            row *= weights[j];
        }
        t
    };
    let mut hessian = rep.y_future_star.t().dot(&wy);
    let u1_block = select_rows(&rep.u_future, &u1_rows);
    hessian = hessian + cfg.r_weight * u1_block.t().dot(&u1_block);

    // Linear term: -2 y_r' Q Y_F*.
    let wy_r = Array1::from_shape_fn(p * n, |j| weights[j] * y_r[j]);
    let linear = -2.0 * rep.y_future_star.t().dot(&wy_r);
    let constant = (0..p * n).map(|j| weights[j] * y_r[j] * y_r[j]).sum();

    let past = rep.past_stack();
    let forecast_rows = select_rows(&rep.u_future, &v0_rows);
    let forecast_rhs = Array1::from_elem(n, v0_last);

    let mut box_rows = Array2::zeros((2 * n, w));
    let mut box_lo = Array1::zeros(2 * n);
    let mut box_hi = Array1::zeros(2 * n);
    for (i, &r) in u1_rows.iter().enumerate() {
        box_rows.row_mut(i).assign(&rep.u_future.row(r));
        box_lo[i] = cfg.a_min;
        box_hi[i] = cfg.a_max;
    }
    for (i, &r) in s_rows.iter().enumerate() {
        box_rows.row_mut(n + i).assign(&rep.y_future_star.row(r));
        box_lo[n + i] = cfg.s_min;
        box_hi[n + i] = cfg.s_max;
    }

    Ok(MpcProblem {
        hessian,
        linear,
        constant,
        past_equality: (past, proj),
        forecast_equality: (forecast_rows, forecast_rhs),
        box_rows,
        box_lo,
        box_hi,
        u_future: rep.u_future.clone(),
        y_future: rep.y_future_star.clone(),
        y_reference: y_r,
        weights,
        r_weight: cfg.r_weight,
    })
}

/// Solve an assembled problem with the dense QP solver.
pub fn solve_qp(problem: &MpcProblem, tol: f64, max_iters: usize) -> Result<QpSolution> {
    let (pa, pb) = &problem.past_equality;
    let (fa, fb) = &problem.forecast_equality;
    let a_eq = vstack(&[pa.view(), fa.view()]);
    let mut b_eq = Array1::zeros(pb.len() + fb.len());
    b_eq.slice_mut(s![..pb.len()]).assign(pb);
    b_eq.slice_mut(s![pb.len()..]).assign(fb);

    let dense = DenseQp {
        p: 2.0 * &problem.hessian,
        q: problem.linear.clone(),
        a_eq,
        b_eq,
        a_box: problem.box_rows.clone(),
        lo: problem.box_lo.clone(),
        hi: problem.box_hi.clone(),
    };
    let out = qp::solve_dense_qp(&dense, tol, max_iters)?;
    let u_star = problem.u_future.dot(&out.x);
    let y_star = problem.y_future.dot(&out.x);
    let objective = tracking_cost(
        &y_star,
        &problem.y_reference,
        &problem.weights,
        &u_star,
        problem.r_weight,
    );
    Ok(QpSolution {
        g: out.x,
        u_star,
        y_star,
        objective,
        kkt_residual: out.kkt_residual,
        status: out.status,
        iterations: out.iterations,
    })
}

/// `||y - y_r||_Q^2 + r * sum(u1^2)` for stacked vectors; `u` carries both
/// channels.
fn tracking_cost(
    y: &Array1<f64>,
    y_r: &Array1<f64>,
    weights: &Array1<f64>,
    u: &Array1<f64>,
    r_weight: f64,
) -> f64 {
    let track: f64 = y
        .iter()
        .zip(y_r.iter())
        .zip(weights.iter())
        .map(|((a, b), w)| w * (a - b) * (a - b))
        .sum();
    let effort: f64 = u.iter().step_by(2).map(|v| v * v).sum();
    track + r_weight * effort
}

/// Per-step solver state reported by the receding-horizon loop.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub k: usize,
    pub status: String,
    pub objective: f64,
    pub kkt_residual: f64,
    pub solve_ms: f64,
    pub u1_applied: f64,
}

/// The controller's answer for one step.
#[derive(Debug, Clone)]
pub struct ControlDecision {
    pub u1: f64,
    pub status: String,
    /// `true` when the underlying QP reached its optimality test.
    pub solved: bool,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Predicted future outputs (empty for the OVM variant).
    pub y_predicted: Array1<f64>,
    /// Reference used this step.
    pub reference: (f64, f64),
}

/// Online CAV policy fed by a measurement window.
pub trait CavController {
    /// Number of `(input, output)` pairs needed before the first compute.
    fn history_len(&self) -> usize;
    /// Append one realized `(input, output)` pair to the window.
    fn push(&mut self, u: ControlInput, y: &TrafficState);
    /// Decide the CAV acceleration for the current step. `x_now` is the
    /// current measured state and `v0_now` the currently observed head
    /// velocity (used by the OVM variant only; the predictive controllers
    /// forecast from the recorded window).
    fn compute(&mut self, x_now: &TrafficState, v0_now: f64) -> Result<ControlDecision>;
    fn name(&self) -> &'static str;
}

/// Measurement window shared by the predictive controllers.
struct Window {
    t_ini: usize,
    pairs: VecDeque<(ControlInput, Vec<f64>)>,
}

impl Window {
    fn new(t_ini: usize) -> Self {
        Window { t_ini, pairs: VecDeque::with_capacity(t_ini + 1) }
    }

    fn push(&mut self, u: ControlInput, y: &TrafficState) {
        self.pairs.push_back((u, y.as_slice().to_vec()));
        while self.pairs.len() > self.t_ini {
            self.pairs.pop_front();
        }
    }

    fn full(&self) -> bool {
        self.pairs.len() == self.t_ini
    }

    /// Stacked `col(u_ini, y_ini)`.
    fn stacked(&self, m: usize, p: usize) -> Array1<f64> {
        let t = self.t_ini;
        let mut w = Array1::zeros((m + p) * t);
        for (k, (u, y)) in self.pairs.iter().enumerate() {
            w[k * m] = u.u1;
            w[k * m + 1] = u.v0;
            for (j, v) in y.iter().enumerate() {
                w[m * t + k * p + j] = *v;
            }
        }
        w
    }

    fn head_stats(&self) -> (f64, f64) {
        let sum: f64 = self.pairs.iter().map(|(u, _)| u.v0).sum();
        let last = self.pairs.back().map(|(u, _)| u.v0).unwrap_or(0.0);
        (last, sum / self.pairs.len().max(1) as f64)
    }
}

/// Condensed strictly convex problem in the `N` future CAV accelerations,
/// shared by both predictive controllers. The future outputs are
/// `y = y_map * u1 + c_y` with the offset `c_y` recomputed each step.
struct ReducedMpc {
    cfg: MpcConfig,
    p: usize,
    /// `y_map' Q y_map + r I`, the condensed cost Hessian (without the
    /// factor two).
    h_red: Array2<f64>,
    y_map: Array2<f64>,
    weights: Array1<f64>,
    s_rows: Vec<usize>,
    /// Constant box rows: identity on `u1`, then the spacing rows of
    /// `y_map`.
    c_rows: Array2<f64>,
}

struct ReducedOutcome {
    u1: Array1<f64>,
    y_pred: Array1<f64>,
    mu: Array1<f64>,
    status: QpStatus,
    iterations: usize,
    objective: f64,
    reduced_kkt: f64,
}

impl ReducedMpc {
    fn new(cfg: MpcConfig, p: usize, y_map: Array2<f64>) -> Self {
        let n = cfg.n_future;
        let weights = {
            let per = cfg.output_weights(p);
            Array1::from_shape_fn(p * n, |j| per[j % p])
        };
        let wy = {
            let mut t = y_map.clone();
            for (j, mut row) in t.axis_iter_mut(Axis(0)).enumerate() {
                row *= weights[j];
            }
            t
        };
        let mut h_red = y_map.t().dot(&wy);
        for i in 0..n {
            h_red[[i, i]] += cfg.r_weight;
        }
        let s_rows = s1_row_indices(p, n);
        let mut c_rows = Array2::zeros((2 * n, n));
        for i in 0..n {
            c_rows[[i, i]] = 1.0;
        }
        for (i, &r) in s_rows.iter().enumerate() {
            c_rows.row_mut(n + i).assign(&y_map.row(r));
        }
        ReducedMpc { cfg, p, h_red, y_map, weights, s_rows, c_rows }
    }

    fn solve(&self, c_y: &Array1<f64>, y_r: &Array1<f64>, tol: f64, max_iters: usize) -> Result<ReducedOutcome> {
        let n = self.cfg.n_future;
        // J(u1) = (c_y + Y u1 - y_r)' Q (.) + r u1'u1; standard form uses 2H.
        let diff = c_y - y_r;
        let wdiff = Array1::from_shape_fn(diff.len(), |j| self.weights[j] * diff[j]);
        let lin = 2.0 * self.y_map.t().dot(&wdiff);

        let mut lo = Array1::zeros(2 * n);
        let mut hi = Array1::zeros(2 * n);
        for i in 0..n {
            lo[i] = self.cfg.a_min;
            hi[i] = self.cfg.a_max;
        }
        for (i, &r) in self.s_rows.iter().enumerate() {
            lo[n + i] = self.cfg.s_min - c_y[r];
            hi[n + i] = self.cfg.s_max - c_y[r];
        }
        let dense = DenseQp::boxed(2.0 * &self.h_red, lin, self.c_rows.clone(), lo, hi);
        let out = qp::solve_dense_qp(&dense, tol, max_iters)?;
        let y_pred = self.y_map.dot(&out.x) + c_y;
        let track: f64 = y_pred
            .iter()
            .zip(y_r.iter())
            .zip(self.weights.iter())
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum();
        let objective = track + self.cfg.r_weight * out.x.dot(&out.x);
        Ok(ReducedOutcome {
            u1: out.x,
            y_pred,
            mu: out.box_multipliers,
            status: out.status,
            iterations: out.iterations,
            objective,
            reduced_kkt: out.kkt_residual,
        })
    }
}

/// Dictionary-free predictive controller.
///
/// Construction eliminates the online equality system once: with the past
/// window and the head-velocity forecast pinned, the future outputs are an
/// affine function of the future CAV accelerations on the representation's
/// trajectory set. Each step then shifts the affine offset and solves the
/// condensed box-QP. The full-space combination vector and its multipliers
/// are recovered for diagnostics.
pub struct DfkController {
    cfg: MpcConfig,
    window: Window,
    reduced: ReducedMpc,
    m: usize,
    p: usize,
    t_ini: usize,
    init_projector: Array2<f64>,
    /// `g = g_map_u * u1 + g_map_b * b_eq`.
    g_map_u: Array2<f64>,
    g_map_b: Array2<f64>,
    /// `c_y = c_y_map * b_eq`.
    c_y_map: Array2<f64>,
    /// Equality stack and transposed null-space basis for the full-space
    /// KKT diagnostics.
    a_eq: Array2<f64>,
    z_basis: Array2<f64>,
    u_future: Array2<f64>,
    y_future: Array2<f64>,
    u1_rows: Vec<usize>,
    s_rows: Vec<usize>,
    qp_tol: f64,
    qp_max_iters: usize,
}

impl DfkController {
    pub fn new(rep: &KoopmanRepresentation, cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        if rep.m != 2 {
            return Err(Error::Param {
                name: "rep",
                details: "the platoon controller expects two input channels".into(),
            });
        }
        if cfg.n_future != rep.n_future {
            return Err(Error::Param {
                name: "n_future",
                details: format!(
                    "config horizon {} != representation horizon {}",
                    cfg.n_future, rep.n_future
                ),
            });
        }
        let n = rep.n_future;
        let p = rep.p;
        let w = rep.width();
        let u1_rows = u1_row_indices(rep.m, n);
        let v0_rows = v0_row_indices(rep.m, n);
        let s_rows = s1_row_indices(p, n);

        let a_eq = vstack(&[
            rep.u_past.view(),
            rep.y_past_star.view(),
            select_rows(&rep.u_future, &v0_rows).view(),
        ]);
        let pinv_a = numerics::pseudoinverse(a_eq.view(), numerics::RANK_TOL)?;
        let z_basis = numerics::null_space_basis(a_eq.view())?;

        let u1_map = select_rows(&rep.u_future, &u1_rows);
        let t_u1 = u1_map.dot(&z_basis);
        if numerics::rank(t_u1.view())? < n {
            return Err(Error::Param {
                name: "rep",
                details: "representation leaves fewer free directions than the horizon; \
                          the acceleration channel is not fully actuatable"
                    .into(),
            });
        }
        let m_pinv = numerics::pseudoinverse(t_u1.view(), numerics::RANK_TOL)?;
        let g_map_u = z_basis.dot(&m_pinv);
        // g = g_map_u u1 + (I - g_map_u U_F[u1]) pinv(A_eq) b_eq.
        let mut n_g = -g_map_u.dot(&u1_map);
        for i in 0..w {
            n_g[[i, i]] += 1.0;
        }
        let g_map_b = n_g.dot(&pinv_a);
        let y_map = rep.y_future_star.dot(&g_map_u);
        let c_y_map = rep.y_future_star.dot(&g_map_b);

        let reduced = ReducedMpc::new(cfg, p, y_map);
        Ok(DfkController {
            cfg,
            window: Window::new(rep.t_ini),
            reduced,
            m: rep.m,
            p,
            t_ini: rep.t_ini,
            init_projector: rep.init_projector.clone(),
            g_map_u,
            g_map_b,
            c_y_map,
            a_eq,
            z_basis,
            u_future: rep.u_future.clone(),
            y_future: rep.y_future_star.clone(),
            u1_rows,
            s_rows,
            qp_tol: 1e-6,
            qp_max_iters: 400,
        })
    }

    fn reference(&self, v0_mean: f64) -> (f64, f64) {
        match self.cfg.reference {
            ReferencePolicy::Fixed { s_r, v_r } => (s_r, v_r),
            ReferencePolicy::FollowHead { s_r } => (s_r, v0_mean),
        }
    }

    /// Full-space KKT residual at the recovered `(g, mu)`.
    fn full_space_kkt(
        &self,
        g: &Array1<f64>,
        b_eq: &Array1<f64>,
        y_star: &Array1<f64>,
        y_r: &Array1<f64>,
        u1: &Array1<f64>,
        mu: &Array1<f64>,
    ) -> f64 {
        let n = self.cfg.n_future;
        let wdiff = Array1::from_shape_fn(y_star.len(), |j| {
            self.reduced.weights[j] * (y_star[j] - y_r[j])
        });
        let mut grad = 2.0 * self.y_future.t().dot(&wdiff);
        let u1_map = select_rows(&self.u_future, &self.u1_rows);
        grad = grad + 2.0 * self.cfg.r_weight * u1_map.t().dot(u1);
        // Box contributions.
        let mu_u = mu.slice(s![..n]).to_owned();
        let mu_s = mu.slice(s![n..]).to_owned();
        grad = grad + u1_map.t().dot(&mu_u);
        let s_map = select_rows(&self.y_future, &self.s_rows);
        grad = grad + s_map.t().dot(&mu_s);
        // Stationarity residual orthogonal to the equality row space.
        let stat = self
            .z_basis
            .t()
            .dot(&grad)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        let feas = (self.a_eq.dot(g) - b_eq)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        stat.max(feas)
    }
}

impl CavController for DfkController {
    fn history_len(&self) -> usize {
        self.t_ini
    }

    fn push(&mut self, u: ControlInput, y: &TrafficState) {
        self.window.push(u, y);
    }

    fn compute(&mut self, _x_now: &TrafficState, _v0_now: f64) -> Result<ControlDecision> {
        if !self.window.full() {
            return Err(Error::Param {
                name: "window",
                details: format!("need {} measurement pairs before computing", self.t_ini),
            });
        }
        let n = self.cfg.n_future;
        let w_ini = self.window.stacked(self.m, self.p);
        let q = &self.init_projector;
        let proj = q.dot(&q.t().dot(&w_ini));
        let (v0_last, v0_mean) = self.window.head_stats();
        let (s_r, v_r) = self.reference(v0_mean);
        let y_r = self.cfg.stacked_reference(self.p, s_r, v_r);

        let mut b_eq = Array1::zeros(proj.len() + n);
        b_eq.slice_mut(s![..proj.len()]).assign(&proj);
        b_eq.slice_mut(s![proj.len()..]).fill(v0_last);
        let c_y = self.c_y_map.dot(&b_eq);

        let out = self.reduced.solve(&c_y, &y_r, self.qp_tol, self.qp_max_iters)?;
        let g = self.g_map_u.dot(&out.u1) + self.g_map_b.dot(&b_eq);
        let kkt_full =
            self.full_space_kkt(&g, &b_eq, &out.y_pred, &y_r, &out.u1, &out.mu);
        Ok(ControlDecision {
            u1: out.u1[0],
            status: out.status.to_string(),
            solved: out.status == QpStatus::Optimal,
            objective: out.objective,
            kkt_residual: out.reduced_kkt.max(kkt_full),
            y_predicted: out.y_pred,
            reference: (s_r, v_r),
        })
    }

    fn name(&self) -> &'static str {
        "dfk"
    }
}

/// Predictive controller with the lifted parametric model.
///
/// The lifted state rolls out affinely in the inputs; condensing on the CAV
/// acceleration channel (head velocity held at its last measured value)
/// yields the same reduced problem shape as the dictionary-free controller.
pub struct EdmdController {
    cfg: MpcConfig,
    model: EdmdModel,
    window: Window,
    reduced: ReducedMpc,
    /// `y = gamma * z0 + s_u1 * u1 + s_v0 * (v0_hat 1)`.
    gamma: Array2<f64>,
    s_v0_sum: Array1<f64>,
    p: usize,
}

impl EdmdController {
    pub fn new(model: &EdmdModel, cfg: MpcConfig, t_ini: usize) -> Result<Self> {
        cfg.validate()?;
        if model.b.ncols() != 2 {
            return Err(Error::Param {
                name: "model",
                details: "the platoon controller expects two input channels".into(),
            });
        }
        let n = cfg.n_future;
        let n_z = model.n_z();
        let p = model.c.nrows();

        // Powers of A once.
        let mut a_pow = Vec::with_capacity(n + 1);
        a_pow.push(Array2::eye(n_z));
        for j in 1..=n {
            let next = a_pow[j - 1].dot(&model.a);
            a_pow.push(next);
        }
        let mut gamma = Array2::zeros((p * n, n_z));
        for j in 0..n {
            gamma
                .slice_mut(s![j * p..(j + 1) * p, ..])
                .assign(&model.c.dot(&a_pow[j]));
        }
        // Input-to-output map: block (j, i) is C A^{j-1-i} B for i < j and D
        // for i == j.
        let mut s_full = Array2::zeros((p * n, 2 * n));
        for j in 0..n {
            for i in 0..=j {
                let blk = if i == j {
                    model.d.clone()
                } else {
                    model.c.dot(&a_pow[j - 1 - i]).dot(&model.b)
                };
                s_full
                    .slice_mut(s![j * p..(j + 1) * p, 2 * i..2 * i + 2])
                    .assign(&blk);
            }
        }
        let mut s_u1 = Array2::zeros((p * n, n));
        let mut s_v0_sum = Array1::zeros(p * n);
        for i in 0..n {
            s_u1.column_mut(i).assign(&s_full.column(2 * i));
            s_v0_sum = s_v0_sum + &s_full.column(2 * i + 1);
        }
        let reduced = ReducedMpc::new(cfg, p, s_u1);
        Ok(EdmdController {
            cfg,
            model: model.clone(),
            window: Window::new(t_ini),
            reduced,
            gamma,
            s_v0_sum,
            p,
        })
    }
}

impl CavController for EdmdController {
    fn history_len(&self) -> usize {
        self.window.t_ini
    }

    fn push(&mut self, u: ControlInput, y: &TrafficState) {
        self.window.push(u, y);
    }

    fn compute(&mut self, x_now: &TrafficState, _v0_now: f64) -> Result<ControlDecision> {
        if !self.window.full() {
            return Err(Error::Param {
                name: "window",
                details: format!("need {} measurement pairs before computing", self.window.t_ini),
            });
        }
        let (v0_last, v0_mean) = self.window.head_stats();
        let (s_r, v_r) = match self.cfg.reference {
            ReferencePolicy::Fixed { s_r, v_r } => (s_r, v_r),
            ReferencePolicy::FollowHead { s_r } => (s_r, v0_mean),
        };
        let y_r = self.cfg.stacked_reference(self.p, s_r, v_r);
        let z0 = self.model.lift(x_now.as_slice());
        let c_y = self.gamma.dot(&z0) + &(&self.s_v0_sum * v0_last);
        let out = self.reduced.solve(&c_y, &y_r, 1e-6, 400)?;
        Ok(ControlDecision {
            u1: out.u1[0],
            status: out.status.to_string(),
            solved: out.status == QpStatus::Optimal,
            objective: out.objective,
            kkt_residual: out.reduced_kkt,
            y_predicted: out.y_pred,
            reference: (s_r, v_r),
        })
    }

    fn name(&self) -> &'static str {
        "edmdk"
    }
}

/// The CAV behaves like another human-driven vehicle (no predictive
/// control); used by the all-human baseline.
pub struct HdvController {
    params: OvmParams,
    /// Reference reported for cost bookkeeping only.
    pub reference: (f64, f64),
}

impl HdvController {
    pub fn new(params: OvmParams, reference: (f64, f64)) -> Self {
        HdvController { params, reference }
    }
}

impl CavController for HdvController {
    fn history_len(&self) -> usize {
        0
    }

    fn push(&mut self, _u: ControlInput, _y: &TrafficState) {}

    fn compute(&mut self, x_now: &TrafficState, v0_now: f64) -> Result<ControlDecision> {
        let u1 = traffic::hdv_acceleration(
            x_now.spacing(1),
            x_now.velocity(1),
            v0_now,
            &self.params,
        );
        Ok(ControlDecision {
            u1,
            status: "hdv".into(),
            solved: true,
            objective: 0.0,
            kkt_residual: 0.0,
            y_predicted: Array1::zeros(0),
            reference: self.reference,
        })
    }

    fn name(&self) -> &'static str {
        "hdv"
    }
}

/// Nonlinear plant wrapper for the closed loop.
pub struct PlantSim {
    pub params: OvmParams,
    pub dt: f64,
    pub state: TrafficState,
}

impl PlantSim {
    pub fn new(params: OvmParams, dt: f64, state: TrafficState) -> Self {
        PlantSim { params, dt, state }
    }

    pub fn step(&mut self, u: &ControlInput) -> Result<()> {
        self.state = traffic::step(&self.state, u, self.dt, &self.params)?;
        Ok(())
    }
}

/// Closed-loop artifacts of one receding-horizon run.
#[derive(Debug)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    pub diagnostics: Vec<StepDiagnostics>,
    /// `(s_r, v_r)` the controller used at each step.
    pub references: Vec<(f64, f64)>,
    /// Largest full-problem KKT residual observed.
    pub max_kkt_residual: f64,
}

/// Run the plant under the controller from step `k0` (inclusive) to `kf`
/// (exclusive); `head_velocity(k)` supplies the exogenous head profile.
///
/// At every step the controller solves its problem, only the first input is
/// applied, the plant advances one step and the measurement window shifts
/// by one. The controller's window must already hold `history_len()` pairs.
/// A solve that does not reach optimality aborts the run with the step
/// index; no fallback input is invented.
pub fn receding_horizon(
    plant: &mut PlantSim,
    controller: &mut dyn CavController,
    head_velocity: &dyn Fn(usize) -> f64,
    k0: usize,
    kf: usize,
) -> Result<ClosedLoopRun> {
    if kf <= k0 {
        return Err(Error::Param { name: "kf", details: "need kf > k0".into() });
    }
    let steps = kf - k0;
    let mut inputs = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps);
    let mut diagnostics = Vec::with_capacity(steps);
    let mut references = Vec::with_capacity(steps);
    let mut max_kkt = 0.0f64;

    for k in k0..kf {
        let v0_now = head_velocity(k);
        let t0 = std::time::Instant::now();
        let decision = controller.compute(&plant.state, v0_now)?;
        let solve_ms = t0.elapsed().as_secs_f64() * 1e3;
        if !decision.solved {
            return Err(Error::SolverAbort { step: k, status: decision.status });
        }
        let u = ControlInput { u1: decision.u1, v0: v0_now };
        outputs.push(plant.state.clone());
        let applied = ControlInput { u1: traffic::clamp_cav_accel(u.u1), v0: u.v0 };
        inputs.push(applied);
        diagnostics.push(StepDiagnostics {
            k,
            status: decision.status,
            objective: decision.objective,
            kkt_residual: decision.kkt_residual,
            solve_ms,
            u1_applied: applied.u1,
        });
        references.push(decision.reference);
        max_kkt = max_kkt.max(decision.kkt_residual);
        plant.step(&u).map_err(|e| match e {
            Error::SimulationDiverged { .. } => Error::SimulationDiverged { step: k },
            other => other,
        })?;
        controller.push(applied, outputs.last().unwrap());
    }
    Ok(ClosedLoopRun {
        trajectory: Trajectory { dt: plant.dt, inputs, outputs },
        diagnostics,
        references,
        max_kkt_residual: max_kkt,
    })
}

/// Realized closed-loop cost: the tracking stage cost summed along the
/// actual trajectory with the same weights and per-step references the
/// controller used.
pub fn realized_cost(traj: &Trajectory, cfg: &MpcConfig, references: &[(f64, f64)]) -> f64 {
    let p = traj.outputs[0].as_slice().len();
    let weights = cfg.output_weights(p);
    let mut total = 0.0;
    for (k, (u, y)) in traj.inputs.iter().zip(traj.outputs.iter()).enumerate() {
        let (s_r, v_r) = references
            .get(k)
            .copied()
            .unwrap_or(match cfg.reference {
                ReferencePolicy::Fixed { s_r, v_r } => (s_r, v_r),
                ReferencePolicy::FollowHead { s_r } => (s_r, u.v0),
            });
        for (j, v) in y.as_slice().iter().enumerate() {
            let target = if j % 2 == 0 { s_r } else { v_r };
            total += weights[j] * (v - target) * (v - target);
        }
        total += cfg.r_weight * u.u1 * u.u1;
    }
    total
}

/// Serialize per-step diagnostics as CSV
/// (`k,status,objective,kkt_residual,solve_ms,u1_applied`).
pub fn diagnostics_csv(rows: &[StepDiagnostics]) -> String {
    let mut out = String::from("k,status,objective,kkt_residual,solve_ms,u1_applied\n");
    for d in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            d.k, d.status, d.objective, d.kkt_residual, d.solve_ms, d.u1_applied
        ));
    }
    out
}

#[cfg(test)]
mod tests {
#[test]
fn debug_rep_structure() {
    use crate::traffic::*;
    use crate::koopman::*;
    use crate::numerics;
    use ndarray::Array1;
    let params = OvmParams::default();
    let traj = generate_offline_data(11, 2, 260, 0.05, &params).unwrap();
    let mut icfg = IdConfig::new(6, 8);
    icfg.t_ini = 6;
    icfg.epsilon = 5e-3;
    icfg.max_iters = 60;
    let rep = iterate(traj.input_matrix().view(), traj.output_matrix().view(), &icfg).unwrap();
    let full = rep.stacked();
    let dec = numerics::svd(full.view()).unwrap();
    eprintln!("full stack sv[0]={:.3e} sv[27..36]={:?}", dec.s[0],
        (27..36.min(dec.s.len())).map(|i| format!("{:.2e}", dec.s[i]/dec.s[0])).collect::<Vec<_>>());
    let sans = numerics::vstack(&[rep.u_past.view(), rep.y_past_star.view(), rep.u_future.view()]);
    eprintln!("rank(full)={} rank(sans_yf)={}", numerics::rank(full.view()).unwrap(), numerics::rank(sans.view()).unwrap());
    let z_sans = numerics::null_space_basis(sans.view()).unwrap();
    let leak = rep.y_future_star.dot(&z_sans);
    let leak_dec = numerics::svd(leak.view()).unwrap();
    eprintln!("||Y_F Z_sans|| top svs: {:?} (Y_F scale {:.3e})",
        (0..4.min(leak_dec.s.len())).map(|i| format!("{:.2e}", leak_dec.s[i])).collect::<Vec<_>>(),
        numerics::fro_norm(rep.y_future_star.view()));
    // raw prediction on an equilibrium window
    let t = rep.t_ini; let p = rep.p; let m = rep.m;
    let mut w_ini = Array1::zeros((m+p)*t);
    for k in 0..t {
        w_ini[k*m] = 0.0; w_ini[k*m+1] = 15.0;
        for i in 0..p/2 { w_ini[m*t + k*p + 2*i] = 20.0; w_ini[m*t + k*p + 2*i+1] = 15.0; }
    }
    let u_f = Array1::from_shape_fn(m*rep.n_future, |j| if j % 2 == 0 { 0.0 } else { 15.0 });
    let y_f = rep.predict_future(&w_ini, &u_f).unwrap();
    let s_pred: Vec<f64> = (0..rep.n_future).map(|j| (y_f[j*p]*100.0).round()/100.0).collect();
    eprintln!("raw ls prediction s1: {:?}", s_pred);
    // projected window version
    let proj = crate::control::project_initial(&rep, &w_ini).unwrap();
    let y_f2 = rep.predict_future(&proj, &u_f).unwrap();
    let s_pred2: Vec<f64> = (0..rep.n_future).map(|j| (y_f2[j*p]*100.0).round()/100.0).collect();
    eprintln!("projected ls prediction s1: {:?}", s_pred2);
}

#[test]
fn debug_equilibrium_infeasible() {
    use crate::traffic::*;
    use crate::koopman::*;
    use crate::control::*;
    let params = OvmParams::default();
    let traj = generate_offline_data(11, 2, 260, 0.05, &params).unwrap();
    let mut icfg = IdConfig::new(6, 8);
    icfg.t_ini = 6;
    icfg.epsilon = 5e-3;
    icfg.max_iters = 60;
    let rep = iterate(traj.input_matrix().view(), traj.output_matrix().view(), &icfg).unwrap();
    eprintln!("rep: iterations {} converged {} final {:.3e}", rep.log.iterations, rep.log.converged, rep.log.final_change);
    eprintln!("stacked rank {} (target {})", rep.stacked_rank().unwrap(), 2*14+6);

    let cfg = MpcConfig { n_future: 8, q_v: 1.0, w_s: 0.5, r_weight: 0.1,
        reference: ReferencePolicy::Fixed { s_r: 20.0, v_r: 15.0 }, ..MpcConfig::default() };
    let x0 = TrafficState::uniform(2, 20.0, 15.0);
    let mut plant = PlantSim::new(params, 0.05, x0.clone());
    let mut ctrl = DfkController::new(&rep, cfg).unwrap();
    for _ in 0..6 { ctrl.push(ControlInput{u1:0.0, v0:15.0}, &x0); }
    for k in 0..40 {
        let d = ctrl.compute(&plant.state, 15.0);
        match d {
            Ok(d) => {
                if k % 5 == 0 || !d.solved {
                    let ys = &d.y_predicted;
                    let s_pred: Vec<f64> = (0..8).map(|j| ys[j*4]).collect();
                    eprintln!("k={k} u1={:+.4e} status={} obj={:.3e} kkt={:.2e} s_pred={:?}", d.u1, d.status, d.objective, d.kkt_residual, s_pred.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
                }
                if !d.solved { break; }
                let u = ControlInput { u1: d.u1, v0: 15.0 };
                let prev = plant.state.clone();
                plant.step(&u).unwrap();
                ctrl.push(ControlInput{u1: clamp_cav_accel(u.u1), v0: u.v0}, &prev);
            }
            Err(e) => { eprintln!("k={k} err {e}"); break; }
        }
    }
}

    use super::*;
    use crate::koopman::{iterate, IdConfig};
    use crate::numerics::fro_norm;
    use crate::traffic::{desired_velocity, generate_offline_data};
    use ndarray::Array2;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const DT: f64 = 0.05;

    /// A small representation from a short platoon excitation run.
    fn small_rep(n_vehicles: usize, t_ini: usize, n_future: usize) -> KoopmanRepresentation {
        let params = OvmParams::default();
        let traj = generate_offline_data(11, n_vehicles, 260, DT, &params).unwrap();
        let mut cfg = IdConfig::new(t_ini, n_future);
        cfg.t_ini = t_ini;
        cfg.epsilon = 5e-3;
        cfg.max_iters = 60;
        iterate(traj.input_matrix().view(), traj.output_matrix().view(), &cfg).unwrap()
    }

    fn small_cfg(n_future: usize) -> MpcConfig {
        MpcConfig {
            n_future,
            q_v: 1.0,
            w_s: 0.5,
            r_weight: 0.1,
            reference: ReferencePolicy::Fixed { s_r: 20.0, v_r: 15.0 },
            ..MpcConfig::default()
        }
    }

    fn equilibrium_window(rep_m: usize, p: usize, t_ini: usize, s: f64, v: f64) -> Array1<f64> {
        let mut w = Array1::zeros((rep_m + p) * t_ini);
        for k in 0..t_ini {
            w[k * rep_m] = 0.0;
            w[k * rep_m + 1] = v;
            for i in 0..p / 2 {
                w[rep_m * t_ini + k * p + 2 * i] = s;
                w[rep_m * t_ini + k * p + 2 * i + 1] = v;
            }
        }
        w
    }

    #[test]
    fn project_initial_is_idempotent_and_orthogonal() {
        let rep = small_rep(2, 6, 8);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let dist = Uniform::new(-1.0, 1.0);
        let w: Array1<f64> =
            Array1::from_shape_fn((rep.m + rep.p) * rep.t_ini, |_| dist.sample(&mut rng));
        let p1 = project_initial(&rep, &w).unwrap();
        let p2 = project_initial(&rep, &p1).unwrap();
        let diff = (&p1 - &p2).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(diff <= 1e-10);
        // Residual orthogonal to every column of the past stack.
        let past = rep.past_stack();
        let resid = &w - &p1;
        let gram = past.t().dot(&resid);
        assert!(
            gram.iter().map(|v| v.abs()).fold(0.0f64, f64::max)
                <= 1e-8 * fro_norm(past.view())
        );
        // Zero projects to zero.
        let zero = Array1::zeros(w.len());
        assert_eq!(project_initial(&rep, &zero).unwrap().iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        // A library column's past window is in range.
        let col = past.column(3).to_owned();
        let proj = project_initial(&rep, &col).unwrap();
        assert!((&proj - &col).iter().map(|v| v.abs()).fold(0.0f64, f64::max) <= 1e-10);
    }

    #[test]
    fn assemble_qp_dimensions() {
        let rep = small_rep(2, 6, 8);
        let cfg = small_cfg(8);
        let p = rep.p;
        let w_ini = equilibrium_window(rep.m, p, rep.t_ini, 20.0, 15.0);
        let prob = assemble_qp(&rep, &cfg, &w_ini).unwrap();
        let width = rep.width();
        assert_eq!(prob.hessian.nrows(), width);
        assert_eq!(prob.past_equality.0.nrows(), (rep.m + p) * rep.t_ini);
        assert_eq!(prob.forecast_equality.0.nrows(), 8);
        assert_eq!(prob.box_rows.nrows(), 2 * 8);
    }

    #[test]
    fn hessian_is_exactly_the_weighted_readout_gram() {
        let rep = small_rep(2, 6, 8);
        let cfg = small_cfg(8);
        let w_ini = equilibrium_window(rep.m, rep.p, rep.t_ini, 20.0, 15.0);
        let prob = assemble_qp(&rep, &cfg, &w_ini).unwrap();
        // Rebuild Y' Q Y + U' R U with the same kernel ops: no g penalty may
        // hide in the Hessian.
        let n = cfg.n_future;
        let weights = {
            let per = cfg.output_weights(rep.p);
            Array1::from_shape_fn(rep.p * n, |j| per[j % rep.p])
        };
        let wy = {
            let mut t = rep.y_future_star.clone();
            for (j, mut row) in t.axis_iter_mut(Axis(0)).enumerate() {
                row *= weights[j];
            }
            t
        };
        let u1_block = select_rows(&rep.u_future, &u1_row_indices(rep.m, n));
        let expect = rep.y_future_star.t().dot(&wy) + cfg.r_weight * u1_block.t().dot(&u1_block);
        let diff = (&prob.hessian - &expect)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn zero_window_zero_reference_admits_zero_solution() {
        let rep = small_rep(2, 6, 8);
        let mut cfg = small_cfg(8);
        cfg.reference = ReferencePolicy::Fixed { s_r: 0.0, v_r: 0.0 };
        // Boxes wide open so the origin is admissible.
        cfg.s_min = -1e6;
        cfg.s_max = 1e6;
        let w_ini = Array1::zeros((rep.m + rep.p) * rep.t_ini);
        let prob = assemble_qp(&rep, &cfg, &w_ini).unwrap();
        let sol = solve_qp(&prob, 1e-6, 600).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.objective.abs() <= 1e-8, "objective {}", sol.objective);
    }

    #[test]
    fn condensed_controller_matches_full_space_solve() {
        let rep = small_rep(2, 6, 8);
        let cfg = small_cfg(8);
        let params = OvmParams::default();
        let v_eq = desired_velocity(19.0, &params);

        // Build a consistent window by simulating at near-equilibrium.
        let x0 = TrafficState::uniform(2, 19.0, v_eq);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let dist = Uniform::new(-0.1, 0.1);
        let u_seq: Vec<ControlInput> = (0..rep.t_ini)
            .map(|_| ControlInput { u1: dist.sample(&mut rng), v0: v_eq })
            .collect();
        let hist = crate::traffic::simulate(&x0, &u_seq, DT, &params).unwrap();

        let mut ctrl = DfkController::new(&rep, cfg).unwrap();
        for (u, y) in hist.inputs.iter().zip(hist.outputs.iter()) {
            ctrl.push(*u, y);
        }
        let w_ini = ctrl.window.stacked(rep.m, rep.p);
        let decision = ctrl.compute(&x0, v_eq).unwrap();

        let prob = assemble_qp(&rep, &cfg, &w_ini).unwrap();
        let sol = solve_qp(&prob, 1e-6, 2000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        // Same objective value and first input (the full-space solution
        // may differ in g, the readouts must agree).
        assert!(
            (sol.objective - decision.objective).abs() <= 1e-5 * (1.0 + sol.objective.abs()),
            "objectives differ: {} vs {}",
            sol.objective,
            decision.objective
        );
        assert!(
            (sol.u_star[0] - decision.u1).abs() <= 1e-4,
            "first inputs differ: {} vs {}",
            sol.u_star[0],
            decision.u1
        );
    }

    #[test]
    fn equilibrium_hold_keeps_accel_near_zero() {
        let rep = small_rep(2, 6, 8);
        let cfg = MpcConfig {
            n_future: 8,
            reference: ReferencePolicy::Fixed { s_r: 20.0, v_r: 15.0 },
            ..small_cfg(8)
        };
        let params = OvmParams::default();
        // Spacing 20 <-> velocity 15 is the plant equilibrium.
        let x0 = TrafficState::uniform(2, 20.0, 15.0);
        let mut plant = PlantSim::new(params, DT, x0.clone());
        let mut ctrl = DfkController::new(&rep, cfg).unwrap();
        for _ in 0..rep.t_ini {
            ctrl.push(ControlInput { u1: 0.0, v0: 15.0 }, &x0);
        }
        let run = receding_horizon(&mut plant, &mut ctrl, &|_k| 15.0, 10, 60).unwrap();
        for d in &run.diagnostics {
            assert!(d.u1_applied.abs() <= 1e-3, "step {} applied {}", d.k, d.u1_applied);
            assert_eq!(d.status, "optimal");
        }
        assert_eq!(run.diagnostics.len(), 50);
    }

    #[test]
    fn constraint_activation_clips_to_a_max() {
        // Demand a velocity far above equilibrium: the first moves must sit
        // on the acceleration ceiling.
        let rep = small_rep(2, 6, 8);
        let cfg = MpcConfig {
            reference: ReferencePolicy::Fixed { s_r: 20.0, v_r: 25.0 },
            w_s: 0.0,
            ..small_cfg(8)
        };
        let x0 = TrafficState::uniform(2, 20.0, 15.0);
        let mut ctrl = DfkController::new(&rep, cfg).unwrap();
        for _ in 0..rep.t_ini {
            ctrl.push(ControlInput { u1: 0.0, v0: 15.0 }, &x0);
        }
        let d = ctrl.compute(&x0, 15.0).unwrap();
        assert!(d.solved);
        assert!((d.u1 - cfg.a_max).abs() <= 1e-6, "u1 {} not at ceiling", d.u1);
    }

    #[test]
    fn receding_horizon_is_deterministic() {
        let rep = small_rep(2, 6, 8);
        let cfg = small_cfg(8);
        let params = OvmParams::default();
        let mut runs = Vec::new();
        for _ in 0..2 {
            let x0 = TrafficState::uniform(2, 20.0, 15.0);
            let mut plant = PlantSim::new(params, DT, x0.clone());
            let mut ctrl = DfkController::new(&rep, cfg).unwrap();
            for _ in 0..rep.t_ini {
                ctrl.push(ControlInput { u1: 0.0, v0: 15.0 }, &x0);
            }
            let head = |k: usize| 15.0 + if (40..80).contains(&k) { 1.0 } else { 0.0 };
            let run = receding_horizon(&mut plant, &mut ctrl, &head, 10, 120).unwrap();
            runs.push(run.trajectory.to_csv());
        }
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn edmd_controller_tracks_equilibrium() {
        let params = OvmParams::default();
        let trajs: Vec<Trajectory> = (0..4)
            .map(|s| generate_offline_data(100 + s, 2, 400, DT, &params).unwrap())
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let dist_s = Uniform::new(5.0, 15.0);
        let dist_v = Uniform::new(10.0, 20.0);
        let centers = Array2::from_shape_fn((6, 4), |(_, j)| {
            if j % 2 == 0 { dist_s.sample(&mut rng) } else { dist_v.sample(&mut rng) }
        });
        let model = crate::koopman::edmd_fit(&trajs, centers).unwrap();
        let cfg = small_cfg(8);
        let mut ctrl = EdmdController::new(&model, cfg, 6).unwrap();
        let x0 = TrafficState::uniform(2, 20.0, 15.0);
        for _ in 0..6 {
            ctrl.push(ControlInput { u1: 0.0, v0: 15.0 }, &x0);
        }
        let d = ctrl.compute(&x0, 15.0).unwrap();
        assert!(d.solved);
        assert!(d.u1.abs() < 0.5, "equilibrium accel {}", d.u1);
    }

    #[test]
    fn realized_cost_zero_on_reference() {
        let cfg = small_cfg(4);
        let x = TrafficState::uniform(3, 20.0, 15.0);
        let traj = Trajectory {
            dt: DT,
            inputs: vec![ControlInput { u1: 0.0, v0: 15.0 }; 5],
            outputs: vec![x; 5],
        };
        let refs = vec![(20.0, 15.0); 5];
        assert_eq!(realized_cost(&traj, &cfg, &refs), 0.0);
    }

    #[test]
    fn realized_cost_single_deviation() {
        let mut cfg = small_cfg(4);
        cfg.q_v = 1.0;
        cfg.w_s = 0.0;
        cfg.r_weight = 0.0;
        let on = TrafficState::uniform(1, 20.0, 15.0);
        let off = TrafficState::uniform(1, 20.0, 15.0 + 0.3);
        let traj = Trajectory {
            dt: DT,
            inputs: vec![ControlInput { u1: 0.0, v0: 15.0 }; 2],
            outputs: vec![on, off],
        };
        let refs = vec![(20.0, 15.0); 2];
        let cost = realized_cost(&traj, &cfg, &refs);
        assert!((cost - 0.09).abs() < 1e-12);
    }

    #[test]
    fn solver_abort_carries_step_index() {
        // An impossible spacing band makes the very first solve infeasible.
        let rep = small_rep(2, 6, 8);
        let cfg = MpcConfig { s_min: 100.0, s_max: 101.0, ..small_cfg(8) };
        let params = OvmParams::default();
        let x0 = TrafficState::uniform(2, 20.0, 15.0);
        let mut plant = PlantSim::new(params, DT, x0.clone());
        let mut ctrl = DfkController::new(&rep, cfg).unwrap();
        for _ in 0..rep.t_ini {
            ctrl.push(ControlInput { u1: 0.0, v0: 15.0 }, &x0);
        }
        let err = receding_horizon(&mut plant, &mut ctrl, &|_| 15.0, 7, 20).unwrap_err();
        match err {
            Error::SolverAbort { step, .. } => assert_eq!(step, 7),
            other => panic!("unexpected error {other}"),
        }
    }
}
