//! Data-driven linear representations of the platoon dynamics.
//!
//! Two routes are provided:
//!
//! * A dictionary-free route: the input/output Hankel stack is driven onto
//!   the set of matrices that could have been generated by a hidden
//!   `n_z`-dimensional linear model, by alternating three projections —
//!   a structured low-rank step ([`low_rank_step`]), a causal
//!   block-triangular regression ([`causal_step`]) and the block-Hankel
//!   projection ([`crate::hankel::hankel_project`]). The input blocks are
//!   data and are never modified; only output rows are optimized. The
//!   result is packaged as a [`KoopmanRepresentation`].
//!
//! * A parametric baseline: lift the state with thin-plate-spline radial
//!   basis functions and fit `(A, B, C, D)` by least squares
//!   ([`edmd_fit`] / [`edmd_predict`]).

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::{self, build_hankel, hankel_project, partition};
use crate::numerics::{self, fro_norm, vstack, RANK_TOL};
use crate::traffic::Trajectory;

/// Configuration of the iterative identification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IdConfig {
    /// Hidden model dimension.
    pub n_z: usize,
    /// Past-window length; at least `n_z`, equal to it by default.
    pub t_ini: usize,
    /// Future (prediction) window length.
    pub n_future: usize,
    /// Relative convergence tolerance of the projection loop.
    pub epsilon: f64,
    /// Iteration cap.
    pub max_iters: usize,
}

impl IdConfig {
    pub fn new(n_z: usize, n_future: usize) -> Self {
        IdConfig {
            n_z,
            t_ini: n_z,
            n_future,
            epsilon: 1e-4,
            max_iters: 500,
        }
    }

    pub fn depth(&self) -> usize {
        self.t_ini + self.n_future
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_z < 1 {
            return Err(Error::Param { name: "n_z", details: "must be at least 1".into() });
        }
        if self.t_ini < self.n_z {
            return Err(Error::Param {
                name: "t_ini",
                details: format!("t_ini ({}) must be at least n_z ({})", self.t_ini, self.n_z),
            });
        }
        if self.n_future < 1 {
            return Err(Error::Param { name: "n_future", details: "must be at least 1".into() });
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Param { name: "epsilon", details: "must be positive".into() });
        }
        Ok(())
    }
}

/// Per-iteration convergence bookkeeping of [`iterate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationLog {
    /// Relative change `||H_y1 - H_y3||_F / ||H_y1||_F` per iteration.
    pub relative_changes: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_change: f64,
}

/// The optimized trajectory library `col(U_P, Y_P*, U_F, Y_F*)` plus the
/// data needed to project an online initial window onto its past range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanRepresentation {
    /// Past input block, exact data (never modified by the iteration).
    pub u_past: Array2<f64>,
    /// Future input block, exact data.
    pub u_future: Array2<f64>,
    /// Optimized past output block.
    pub y_past_star: Array2<f64>,
    /// Optimized future output block.
    pub y_future_star: Array2<f64>,
    pub t_ini: usize,
    pub n_future: usize,
    /// Input block size (entries per input sample).
    pub m: usize,
    /// Output block size (entries per output sample).
    pub p: usize,
    pub n_z: usize,
    /// Orthonormal basis of `range(col(U_P, Y_P*))`, stored as columns.
    /// The range-space projection of a window `w` is `Q (Q^T w)`.
    pub init_projector: Array2<f64>,
    pub log: IterationLog,
    /// Seed of the data-collection run, when the data came from one.
    pub data_seed: Option<u64>,
}

impl KoopmanRepresentation {
    /// Number of library columns (the dimension of the combination vector).
    pub fn width(&self) -> usize {
        self.u_past.ncols()
    }

    pub fn depth(&self) -> usize {
        self.t_ini + self.n_future
    }

    /// The full stack `col(U_P, Y_P*, U_F, Y_F*)`.
    pub fn stacked(&self) -> Array2<f64> {
        vstack(&[
            self.u_past.view(),
            self.y_past_star.view(),
            self.u_future.view(),
            self.y_future_star.view(),
        ])
    }

    /// The past rows `col(U_P, Y_P*)`.
    pub fn past_stack(&self) -> Array2<f64> {
        vstack(&[self.u_past.view(), self.y_past_star.view()])
    }

    /// Numerical rank of the full stack under the global cutoff.
    pub fn stacked_rank(&self) -> Result<usize> {
        numerics::rank(self.stacked().view())
    }

    /// Least-squares prediction: find the library combination matching the
    /// stacked initial window and the future inputs, and read off the
    /// future outputs.
    ///
    /// `w_ini` is `col(u_ini, y_ini)` of length `(m + p) * t_ini`; `u_future`
    /// is the stacked future input of length `m * n_future`. The returned
    /// vector has length `p * n_future`.
    pub fn predict_future(&self, w_ini: &Array1<f64>, u_future: &Array1<f64>) -> Result<Array1<f64>> {
        let mp = (self.m + self.p) * self.t_ini;
        if w_ini.len() != mp {
            return Err(Error::Shape {
                context: "predict_future",
                details: format!("w_ini length {} != {mp}", w_ini.len()),
            });
        }
        if u_future.len() != self.m * self.n_future {
            return Err(Error::Shape {
                context: "predict_future",
                details: format!("u_future length {} != {}", u_future.len(), self.m * self.n_future),
            });
        }
        let lhs = vstack(&[
            self.u_past.view(),
            self.y_past_star.view(),
            self.u_future.view(),
        ]);
        let mut rhs = Array1::zeros(lhs.nrows());
        rhs.slice_mut(s![..self.m * self.t_ini])
            .assign(&w_ini.slice(s![..self.m * self.t_ini]));
        rhs.slice_mut(s![self.m * self.t_ini..mp])
            .assign(&w_ini.slice(s![self.m * self.t_ini..]));
        rhs.slice_mut(s![mp..]).assign(u_future);
        let rhs2 = rhs.insert_axis(Axis(1));
        let g = numerics::least_squares(lhs.view(), rhs2.view())?;
        Ok(self.y_future_star.dot(&g).index_axis(Axis(1), 0).to_owned())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Structured low-rank step: replace the output stack by the closest one
/// (in Frobenius norm) for which `col(U_P, Y_P, U_F, Y_F)` has rank at most
/// `rank_target`, while keeping the input rows exactly.
///
/// Splitting the output rows into their component inside the input row
/// space and its orthogonal complement reduces the constraint to a plain
/// rank bound on the complement, solved by singular-value truncation. The
/// input rows therefore stay untouched and the stack meets the rank bound
/// by construction.
///
/// When the target is not reachable (at or above full rank) a warning is
/// logged and the input is returned unchanged.
pub fn low_rank_step(
    u_p: ArrayView2<f64>,
    u_f: ArrayView2<f64>,
    h_y: ArrayView2<f64>,
    rank_target: usize,
) -> Result<Array2<f64>> {
    let u_stack = vstack(&[u_p.view(), u_f.view()]);
    if u_stack.ncols() != h_y.ncols() {
        return Err(Error::Shape {
            context: "low_rank_step",
            details: "input and output stacks must have equal widths".into(),
        });
    }
    let total_rows = u_stack.nrows() + h_y.nrows();
    if rank_target >= total_rows.min(h_y.ncols()) {
        log::warn!(
            "low_rank_step: rank target {rank_target} is not below full rank {}; returning input unchanged",
            total_rows.min(h_y.ncols())
        );
        return Ok(h_y.to_owned());
    }
    let qu = numerics::row_space_basis(u_stack.view())?;
    low_rank_step_with_basis(&qu, h_y, rank_target)
}

/// [`low_rank_step`] with a precomputed orthonormal row-space basis of the
/// input stack. The basis does not change across iterations, so the
/// iteration loop computes it once.
fn low_rank_step_with_basis(
    qu: &Array2<f64>,
    h_y: ArrayView2<f64>,
    rank_target: usize,
) -> Result<Array2<f64>> {
    let rank_u = qu.nrows();
    let y_par = h_y.dot(&qu.t()).dot(qu);
    if rank_target <= rank_u {
        log::warn!(
            "low_rank_step: rank target {rank_target} leaves no budget beyond the input rank {rank_u}"
        );
        return Ok(y_par);
    }
    let budget = rank_target - rank_u;
    let y_perp = &h_y - &y_par;
    if budget >= y_perp.nrows().min(y_perp.ncols()) {
        return Ok(h_y.to_owned());
    }
    let trunc = numerics::truncate_rank(y_perp.view(), budget)?;
    Ok(y_par + trunc)
}

/// Incremental orthonormal row basis with bookkeeping of which source row
/// produced each basis vector and of the expansion of each basis vector in
/// the source rows. Rows are processed in order, so regressing onto the
/// first `r` source rows is a projection onto the basis prefix whose source
/// indices are below `r`.
struct NestedRowBasis {
    /// Orthonormal basis rows.
    basis: Array2<f64>,
    /// Expansion of each basis row in the source rows.
    coeffs: Array2<f64>,
    /// Source row that created each basis vector (non-decreasing).
    source: Vec<usize>,
}

impl NestedRowBasis {
    fn build(rows: ArrayView2<f64>, want_coeffs: bool) -> Self {
        let d = rows.nrows();
        let w = rows.ncols();
        let max_norm = rows
            .axis_iter(Axis(0))
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0f64, f64::max);
        let tol = RANK_TOL * max_norm.max(f64::MIN_POSITIVE);
        let mut basis: Vec<Array1<f64>> = Vec::new();
        let mut coeffs: Vec<Array1<f64>> = Vec::new();
        let mut source = Vec::new();
        for i in 0..d {
            let mut v = rows.row(i).to_owned();
            let mut c = if want_coeffs {
                let mut e = Array1::zeros(d);
                e[i] = 1.0;
                e
            } else {
                Array1::zeros(0)
            };
            // Two orthogonalization sweeps for numerical robustness.
            for _ in 0..2 {
                for (b, bc) in basis.iter().zip(coeffs.iter()) {
                    let alpha = v.dot(b);
                    v.scaled_add(-alpha, b);
                    if want_coeffs {
                        c.scaled_add(-alpha, bc);
                    }
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > tol {
                basis.push(&v / norm);
                if want_coeffs {
                    coeffs.push(&c / norm);
                } else {
                    coeffs.push(c);
                }
                source.push(i);
            }
        }
        let n_b = basis.len();
        let mut bm = Array2::zeros((n_b, w));
        for (j, b) in basis.iter().enumerate() {
            bm.row_mut(j).assign(b);
        }
        let mut cm = Array2::zeros((n_b, if want_coeffs { d } else { 0 }));
        if want_coeffs {
            for (j, c) in coeffs.iter().enumerate() {
                cm.row_mut(j).assign(c);
            }
        }
        NestedRowBasis { basis: bm, coeffs: cm, source }
    }

    /// Number of basis vectors built from source rows with index below `r`.
    fn prefix_len(&self, r: usize) -> usize {
        self.source.iter().take_while(|&&i| i < r).count()
    }
}

/// Causality projection: refit every future output block row by least
/// squares onto the past data and the future inputs available up to that
/// block, which forces the predictor's future gain to be lower
/// block-triangular.
///
/// Returns the refitted future output stack and the assembled predictor
/// `K = [K_p K_f]` over the regressor rows `col(U_P, Y_P1, U_F)`; the
/// blocks of `K_f` above the block diagonal are zero by construction. The
/// past output rows pass through unchanged (the caller keeps them).
pub fn causal_step(
    u_p: ArrayView2<f64>,
    y_p1: ArrayView2<f64>,
    u_f: ArrayView2<f64>,
    y_f1: ArrayView2<f64>,
    m: usize,
    p: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    causal_step_impl(u_p, y_p1, u_f, y_f1, m, p, true)
        .map(|(y, k)| (y, k.expect("coefficients requested")))
}

fn causal_step_impl(
    u_p: ArrayView2<f64>,
    y_p1: ArrayView2<f64>,
    u_f: ArrayView2<f64>,
    y_f1: ArrayView2<f64>,
    m: usize,
    p: usize,
    want_k: bool,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    if m == 0 || p == 0 || u_f.nrows() % m != 0 || y_f1.nrows() % p != 0 {
        return Err(Error::Param {
            name: "block sizes",
            details: "row counts must be multiples of the block sizes".into(),
        });
    }
    let n = u_f.nrows() / m;
    if y_f1.nrows() / p != n {
        return Err(Error::Shape {
            context: "causal_step",
            details: "future input and output stacks must have equal depth".into(),
        });
    }
    let w = u_p.ncols();
    if [y_p1.ncols(), u_f.ncols(), y_f1.ncols()].iter().any(|&c| c != w) {
        return Err(Error::Shape {
            context: "causal_step",
            details: "all blocks must have equal widths".into(),
        });
    }
    let regressors = vstack(&[u_p.view(), y_p1.view(), u_f.view()]);
    let past_rows = u_p.nrows() + y_p1.nrows();
    let nested = NestedRowBasis::build(regressors.view(), want_k);

    // Projection coefficients of every future output row onto the basis.
    let proj = y_f1.dot(&nested.basis.t());

    let mut fitted = Array2::zeros(y_f1.raw_dim());
    let mut k = if want_k {
        Some(Array2::zeros((y_f1.nrows(), regressors.nrows())))
    } else {
        None
    };
    for bi in 0..n {
        let usable = nested.prefix_len(past_rows + m * (bi + 1));
        let rows = s![bi * p..(bi + 1) * p, ..];
        let proj_blk = proj.slice(s![bi * p..(bi + 1) * p, ..usable]);
        fitted
            .slice_mut(rows)
            .assign(&proj_blk.dot(&nested.basis.slice(s![..usable, ..])));
        if let Some(k) = k.as_mut() {
            k.slice_mut(rows)
                .assign(&proj_blk.dot(&nested.coeffs.slice(s![..usable, ..])));
        }
    }
    Ok((fitted, k))
}

/// Alternating-projection identification of the output Hankel stack.
///
/// Starting from the data stack `H_y = col(Y_P, Y_F)`, repeat
/// low-rank step, causality projection, block-Hankel projection until the
/// relative change between the low-rank iterate and the Hankel-projected
/// iterate falls below `cfg.epsilon`, then return the low-rank iterate of
/// the final sweep together with the untouched input blocks and the
/// range-space data for the online initial-window projection.
///
/// On hitting the iteration cap the best (last) iterate is returned with
/// `log.converged == false`.
pub fn iterate(u_d: ArrayView2<f64>, y_d: ArrayView2<f64>, cfg: &IdConfig) -> Result<KoopmanRepresentation> {
    cfg.validate()?;
    if u_d.nrows() != y_d.nrows() {
        return Err(Error::Shape {
            context: "iterate",
            details: format!("u has {} samples, y has {}", u_d.nrows(), y_d.nrows()),
        });
    }
    let m = u_d.ncols();
    let p = y_d.ncols();
    let l = cfg.depth();
    let rank_target = m * l + cfg.n_z;

    if !hankel::is_persistently_exciting(u_d, l)? {
        return Err(Error::Param {
            name: "u_d",
            details: format!("input data is not persistently exciting of order {l}"),
        });
    }
    let hu = build_hankel(u_d, l)?;
    let hy = build_hankel(y_d, l)?;
    if hu.width < rank_target {
        return Err(Error::InsufficientData { len: hu.width, required: rank_target });
    }
    let pu = partition(&hu, cfg.t_ini, cfg.n_future)?;
    let py = partition(&hy, cfg.t_ini, cfg.n_future)?;

    let u_stack = vstack(&[pu.past.view(), pu.future.view()]);
    let qu = numerics::row_space_basis(u_stack.view())?;

    let h_y = vstack(&[py.past.view(), py.future.view()]);
    let mut h_y3 = h_y.clone();
    let mut h_y1 = h_y.clone();
    let mut changes = Vec::new();
    let mut converged = false;

    let past_y_rows = p * cfg.t_ini;
    for _ in 0..cfg.max_iters {
        h_y1 = low_rank_step_with_basis(&qu, h_y3.view(), rank_target)?;
        let y_p1 = h_y1.slice(s![..past_y_rows, ..]);
        let y_f1 = h_y1.slice(s![past_y_rows.., ..]);
        let (y_f2, _) = causal_step_impl(pu.past.view(), y_p1, pu.future.view(), y_f1, m, p, false)?;
        let h_y2 = vstack(&[y_p1, y_f2.view()]);
        h_y3 = hankel_project(h_y2.view(), p)?;
        let denom = fro_norm(h_y1.view()).max(f64::MIN_POSITIVE);
        let rel = fro_norm((&h_y1 - &h_y3).view()) / denom;
        changes.push(rel);
        if rel <= cfg.epsilon {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "iterate: projection loop hit the iteration cap ({}) with relative change {:.3e}",
            cfg.max_iters,
            changes.last().copied().unwrap_or(f64::NAN)
        );
    }

    let y_past_star = h_y1.slice(s![..past_y_rows, ..]).to_owned();
    let y_future_star = h_y1.slice(s![past_y_rows.., ..]).to_owned();
    let past = vstack(&[pu.past.view(), y_past_star.view()]);
    let init_projector = numerics::column_space_basis(past.view())?;

    let final_change = changes.last().copied().unwrap_or(0.0);
    Ok(KoopmanRepresentation {
        u_past: pu.past,
        u_future: pu.future,
        y_past_star,
        y_future_star,
        t_ini: cfg.t_ini,
        n_future: cfg.n_future,
        m,
        p,
        n_z: cfg.n_z,
        init_projector,
        log: IterationLog {
            iterations: changes.len(),
            relative_changes: changes,
            converged,
            final_change,
        },
        data_seed: None,
    })
}

/// Thin-plate-spline lift: the raw state followed by
/// `r^2 ln r` per center, where `r` is the distance to the center. The
/// value at `r = 0` is the continuous limit, zero.
pub fn tps_lift(x: &[f64], centers: ArrayView2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(x.len() + centers.nrows());
    for (i, v) in x.iter().enumerate() {
        out[i] = *v;
    }
    for (c, row) in centers.axis_iter(Axis(0)).enumerate() {
        let r2: f64 = row
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        out[x.len() + c] = if r2 > 0.0 { r2 * r2.sqrt().ln() } else { 0.0 };
    }
    out
}

/// Parametric lifted linear model fit by least squares.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdmdModel {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub d: Array2<f64>,
    /// Lift centers, one per row; the lift is the raw state followed by one
    /// thin-plate-spline value per center.
    pub centers: Array2<f64>,
    /// The dictionary contains the raw state as its leading block.
    pub includes_state: bool,
    /// The regressor stack was rank deficient and the minimum-norm solution
    /// was taken.
    pub rank_deficient: bool,
}

impl EdmdModel {
    pub fn n_z(&self) -> usize {
        self.a.nrows()
    }

    pub fn lift(&self, x: &[f64]) -> Array1<f64> {
        tps_lift(x, self.centers.view())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fit a lifted linear model from one or more trajectories.
///
/// Lifted states are regressed one step ahead within each trajectory (no
/// pairs are formed across trajectory boundaries) and the output map is fit
/// on the same columns. Rank-deficient regressors fall back to the
/// minimum-norm solution with a logged warning.
pub fn edmd_fit(trajectories: &[Trajectory], centers: Array2<f64>) -> Result<EdmdModel> {
    if trajectories.is_empty() {
        return Err(Error::Param { name: "trajectories", details: "need at least one".into() });
    }
    let p = trajectories[0].outputs[0].as_slice().len();
    let m = 2;
    let n_z = p + centers.nrows();
    let total: usize = trajectories
        .iter()
        .map(|t| t.len().saturating_sub(1))
        .sum();
    if total < n_z + m {
        return Err(Error::InsufficientData { len: total, required: n_z + m });
    }

    let mut z = Array2::zeros((n_z, total));
    let mut z_next = Array2::zeros((n_z, total));
    let mut u = Array2::zeros((m, total));
    let mut y = Array2::zeros((p, total));
    let mut col = 0;
    for traj in trajectories {
        if traj.len() < 2 {
            continue;
        }
        let mut lifted_prev = tps_lift(traj.outputs[0].as_slice(), centers.view());
        for k in 0..traj.len() - 1 {
            let lifted_next = tps_lift(traj.outputs[k + 1].as_slice(), centers.view());
            z.column_mut(col).assign(&lifted_prev);
            z_next.column_mut(col).assign(&lifted_next);
            u[[0, col]] = traj.inputs[k].u1;
            u[[1, col]] = traj.inputs[k].v0;
            for (j, v) in traj.outputs[k].as_slice().iter().enumerate() {
                y[[j, col]] = *v;
            }
            lifted_prev = lifted_next;
            col += 1;
        }
    }

    // Regressor stack col(Z, U); both fits share it.
    let zu = vstack(&[z.view(), u.view()]);
    let reg_rank = numerics::rank(zu.view())?;
    let rank_deficient = reg_rank < zu.nrows();
    if rank_deficient {
        log::warn!(
            "edmd_fit: regressor stack is rank deficient ({} of {} rows); using the minimum-norm fit",
            reg_rank,
            zu.nrows()
        );
    }
    // X * [Z; U] ~ target  <=>  [Z; U]^T X^T ~ target^T.
    let ab = numerics::least_squares(zu.t(), z_next.t())?.t().to_owned();
    let cd = numerics::least_squares(zu.t(), y.t())?.t().to_owned();

    Ok(EdmdModel {
        a: ab.slice(s![.., ..n_z]).to_owned(),
        b: ab.slice(s![.., n_z..]).to_owned(),
        c: cd.slice(s![.., ..n_z]).to_owned(),
        d: cd.slice(s![.., n_z..]).to_owned(),
        centers,
        includes_state: true,
        rank_deficient,
    })
}

/// Roll the lifted model forward from a raw initial state under an input
/// sequence (one input per row), returning one output per row.
pub fn edmd_predict(model: &EdmdModel, x0: &[f64], u_seq: ArrayView2<f64>) -> Result<Array2<f64>> {
    if u_seq.nrows() == 0 {
        return Err(Error::Param { name: "u_seq", details: "must be nonempty".into() });
    }
    if u_seq.ncols() != model.b.ncols() {
        return Err(Error::Shape {
            context: "edmd_predict",
            details: format!("input width {} != {}", u_seq.ncols(), model.b.ncols()),
        });
    }
    let p = model.c.nrows();
    let mut out = Array2::zeros((u_seq.nrows(), p));
    let mut zk = model.lift(x0);
    for (k, uk) in u_seq.axis_iter(Axis(0)).enumerate() {
        let yk = model.c.dot(&zk) + model.d.dot(&uk);
        out.row_mut(k).assign(&yk);
        zk = model.a.dot(&zk) + model.b.dot(&uk);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::{ControlInput, TrafficState};
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Minimal discrete LTI simulator for oracle data.
    struct Lti {
        a: Array2<f64>,
        b: Array2<f64>,
        c: Array2<f64>,
        d: Array2<f64>,
    }

    impl Lti {
        fn simulate(&self, x0: &Array1<f64>, u: &Array2<f64>) -> Array2<f64> {
            let mut x = x0.clone();
            let mut y = Array2::zeros((u.nrows(), self.c.nrows()));
            for (k, uk) in u.axis_iter(Axis(0)).enumerate() {
                y.row_mut(k).assign(&(self.c.dot(&x) + self.d.dot(&uk)));
                x = self.a.dot(&x) + self.b.dot(&uk);
            }
            y
        }
    }

    fn test_lti() -> Lti {
        // Stable 3-state, 2-input, 2-output system.
        Lti {
            a: ndarray::array![[0.8, 0.1, 0.0], [0.0, 0.6, 0.2], [0.05, 0.0, 0.7]],
            b: ndarray::array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.2]],
            c: ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]],
            d: ndarray::array![[0.0, 0.0], [0.1, 0.0]],
        }
    }

    fn random_signal(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
    }

    #[test]
    fn low_rank_step_is_identity_on_lti_data() {
        let sys = test_lti();
        let u = random_signal(160, 2, 1);
        let y = sys.simulate(&ndarray::array![0.3, -0.2, 0.5], &u);
        let cfg = IdConfig::new(3, 6);
        let l = cfg.depth();
        let hu = build_hankel(u.view(), l).unwrap();
        let hy = build_hankel(y.view(), l).unwrap();
        let pu = partition(&hu, cfg.t_ini, cfg.n_future).unwrap();
        let py = partition(&hy, cfg.t_ini, cfg.n_future).unwrap();
        let h_y = vstack(&[py.past.view(), py.future.view()]);
        let out = low_rank_step(
            pu.past.view(),
            pu.future.view(),
            h_y.view(),
            2 * l + 3,
        )
        .unwrap();
        let rel = fro_norm((&out - &h_y).view()) / fro_norm(h_y.view());
        assert!(rel <= 1e-8, "relative change {rel}");
    }

    #[test]
    fn low_rank_step_full_rank_target_is_identity() {
        let u_p = random_signal(2, 10, 2);
        let u_f = random_signal(2, 10, 3);
        let h_y = random_signal(6, 10, 4);
        let out = low_rank_step(u_p.view(), u_f.view(), h_y.view(), 10).unwrap();
        assert_eq!(fro_norm((&out - &h_y).view()), 0.0);
    }

    #[test]
    fn low_rank_step_meets_rank_bound() {
        let u_p = random_signal(2, 30, 5);
        let u_f = random_signal(2, 30, 6);
        let h_y = random_signal(12, 30, 7);
        let target = 8;
        let out = low_rank_step(u_p.view(), u_f.view(), h_y.view(), target).unwrap();
        let stack = vstack(&[u_p.view(), out.slice(s![..6, ..]), u_f.view(), out.slice(s![6.., ..])]);
        assert!(numerics::rank(stack.view()).unwrap() <= target);
    }

    #[test]
    fn causal_step_is_fixed_point_for_causal_targets() {
        // Targets generated by an explicitly causal predictor.
        let m = 2;
        let p = 2;
        let t_ini = 3;
        let n = 4;
        let w = 40;
        let u_p = random_signal(m * t_ini, w, 8);
        let y_p = random_signal(p * t_ini, w, 9);
        let u_f = random_signal(m * n, w, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let dist = Uniform::new(-0.5, 0.5);
        let past = vstack(&[u_p.view(), y_p.view()]);
        let mut y_f = Array2::zeros((p * n, w));
        for bi in 0..n {
            let mut k_p = Array2::zeros((p, past.nrows()));
            k_p.mapv_inplace(|_| dist.sample(&mut rng));
            let mut k_f = Array2::zeros((p, m * (bi + 1)));
            k_f.mapv_inplace(|_| dist.sample(&mut rng));
            let contrib = k_p.dot(&past) + k_f.dot(&u_f.slice(s![..m * (bi + 1), ..]));
            y_f.slice_mut(s![bi * p..(bi + 1) * p, ..]).assign(&contrib);
        }
        let (fitted, _k) = causal_step(u_p.view(), y_p.view(), u_f.view(), y_f.view(), m, p).unwrap();
        let rel = fro_norm((&fitted - &y_f).view()) / fro_norm(y_f.view());
        assert!(rel <= 1e-10, "relative change {rel}");
    }

    #[test]
    fn causal_step_single_block_is_plain_least_squares() {
        let m = 1;
        let p = 2;
        let u_p = random_signal(2, 25, 12);
        let y_p = random_signal(4, 25, 13);
        let u_f = random_signal(1, 25, 14);
        let y_f = random_signal(2, 25, 15);
        let (fitted, _) = causal_step(u_p.view(), y_p.view(), u_f.view(), y_f.view(), m, p).unwrap();
        // Compare against the normal-equation solution on the full regressor.
        let reg = vstack(&[u_p.view(), y_p.view(), u_f.view()]);
        let coeff = numerics::least_squares(reg.t(), y_f.t()).unwrap();
        let direct = coeff.t().dot(&reg);
        assert!(fro_norm((&fitted - &direct).view()) <= 1e-10);
    }

    #[test]
    fn causal_step_residual_orthogonal_per_block() {
        let m = 2;
        let p = 3;
        let t_ini = 2;
        let n = 3;
        let u_p = random_signal(m * t_ini, 60, 16);
        let y_p = random_signal(p * t_ini, 60, 17);
        let u_f = random_signal(m * n, 60, 18);
        let y_f = random_signal(p * n, 60, 19);
        let (fitted, _) = causal_step(u_p.view(), y_p.view(), u_f.view(), y_f.view(), m, p).unwrap();
        let resid = &y_f - &fitted;
        for bi in 0..n {
            let reg = vstack(&[u_p.view(), y_p.view(), u_f.slice(s![..m * (bi + 1), ..])]);
            let blk = resid.slice(s![bi * p..(bi + 1) * p, ..]);
            let gram = blk.dot(&reg.t());
            assert!(
                fro_norm(gram.view()) <= 1e-8 * fro_norm(y_f.view()) * fro_norm(reg.view()),
                "block {bi} residual not orthogonal"
            );
        }
    }

    #[test]
    fn causal_step_k_is_lower_block_triangular() {
        let m = 2;
        let p = 2;
        let t_ini = 2;
        let n = 3;
        let u_p = random_signal(m * t_ini, 50, 20);
        let y_p = random_signal(p * t_ini, 50, 21);
        let u_f = random_signal(m * n, 50, 22);
        let y_f = random_signal(p * n, 50, 23);
        let (fitted, k) = causal_step(u_p.view(), y_p.view(), u_f.view(), y_f.view(), m, p).unwrap();
        let past_rows = (m + p) * t_ini;
        for bi in 0..n {
            for r in 0..p {
                for col in past_rows + m * (bi + 1)..k.ncols() {
                    assert_eq!(k[[bi * p + r, col]], 0.0);
                }
            }
        }
        // K reproduces the fitted values on the regressors.
        let reg = vstack(&[u_p.view(), y_p.view(), u_f.view()]);
        let via_k = k.dot(&reg);
        assert!(fro_norm((&via_k - &fitted).view()) <= 1e-8 * fro_norm(fitted.view()).max(1.0));
    }

    #[test]
    fn iterate_converges_immediately_on_lti_data() {
        let sys = test_lti();
        let u = random_signal(200, 2, 30);
        let y = sys.simulate(&ndarray::array![0.1, 0.0, -0.4], &u);
        let cfg = IdConfig::new(3, 8);
        let rep = iterate(u.view(), y.view(), &cfg).unwrap();
        assert!(rep.log.converged);
        assert!(rep.log.iterations <= 2, "iterations {}", rep.log.iterations);
        let h_y = vstack(&[rep.y_past_star.view(), rep.y_future_star.view()]);
        let hy_data = build_hankel(y.view(), cfg.depth()).unwrap();
        let rel = fro_norm((&h_y - &hy_data.matrix).view()) / fro_norm(hy_data.matrix.view());
        assert!(rel <= 1e-8, "relative distance {rel}");
        // Inputs are bit-identical to the data Hankel blocks.
        let hu = build_hankel(u.view(), cfg.depth()).unwrap();
        let pu = partition(&hu, cfg.t_ini, cfg.n_future).unwrap();
        assert_eq!(rep.u_past, pu.past);
        assert_eq!(rep.u_future, pu.future);
        assert!(rep.stacked_rank().unwrap() <= 2 * cfg.depth() + cfg.n_z);
    }

    #[test]
    fn iterate_rejects_weak_excitation() {
        let u = Array2::from_elem((100, 1), 1.0);
        let y = Array2::from_elem((100, 1), 2.0);
        let cfg = IdConfig::new(2, 3);
        assert!(iterate(u.view(), y.view(), &cfg).is_err());
    }

    #[test]
    fn representation_round_trips_through_json() {
        let sys = test_lti();
        let u = random_signal(120, 2, 31);
        let y = sys.simulate(&ndarray::array![0.0, 0.2, 0.1], &u);
        let cfg = IdConfig::new(3, 4);
        let mut rep = iterate(u.view(), y.view(), &cfg).unwrap();
        rep.data_seed = Some(31);
        let dir = std::env::temp_dir().join("dfkmpc_rep_roundtrip.json");
        rep.save_json(&dir).unwrap();
        let back = KoopmanRepresentation::load_json(&dir).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(back.u_past, rep.u_past);
        assert_eq!(back.y_future_star, rep.y_future_star);
        assert_eq!(back.init_projector, rep.init_projector);
        assert_eq!(back.data_seed, Some(31));
    }

    #[test]
    fn tps_lift_closed_forms() {
        let centers = ndarray::array![[1.0, 0.0], [0.0, 0.0]];
        // x equals the first center: that component is the r -> 0 limit.
        let lifted = tps_lift(&[1.0, 0.0], centers.view());
        assert_eq!(lifted[2], 0.0);
        // Distance one from the second center: ln 1 = 0.
        assert_eq!(lifted[3], 0.0);
        // Distance e from a center gives e^2.
        let centers = ndarray::array![[0.0]];
        let e = std::f64::consts::E;
        let lifted = tps_lift(&[e], centers.view());
        assert!((lifted[1] - e * e).abs() < 1e-12);
    }

    fn linear_plant_trajectory(seed: u64, len: usize) -> Trajectory {
        // A synthetic linear "plant" packaged as a trajectory: with an empty
        // center set the lift is the identity and the fit must recover the
        // matrices.
        let a = ndarray::array![[0.9, 0.05], [0.0, 0.8]];
        let b = ndarray::array![[0.1, 0.0], [0.0, 0.2]];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        let mut x = ndarray::array![dist.sample(&mut rng), dist.sample(&mut rng)];
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for _ in 0..len {
            let u = ControlInput { u1: dist.sample(&mut rng), v0: dist.sample(&mut rng) };
            outputs.push(TrafficState::new(x.to_vec()).unwrap());
            inputs.push(u);
            x = a.dot(&x) + b.dot(&ndarray::array![u.u1, u.v0]);
        }
        Trajectory { dt: 0.05, inputs, outputs }
    }

    #[test]
    fn edmd_recovers_linear_plant_with_identity_lift() {
        let trajs: Vec<Trajectory> = (0..3).map(|s| linear_plant_trajectory(s, 80)).collect();
        let model = edmd_fit(&trajs, Array2::zeros((0, 2))).unwrap();
        let a_true = ndarray::array![[0.9, 0.05], [0.0, 0.8]];
        let b_true = ndarray::array![[0.1, 0.0], [0.0, 0.2]];
        assert!(fro_norm((&model.a - &a_true).view()) <= 1e-8);
        assert!(fro_norm((&model.b - &b_true).view()) <= 1e-8);
        assert!(fro_norm((&model.c - &Array2::<f64>::eye(2)).view()) <= 1e-8);
        assert!(fro_norm(model.d.view()) <= 1e-8);
        assert!(!model.rank_deficient);
    }

    #[test]
    fn edmd_flags_degenerate_data() {
        // A constant trajectory cannot excite the regressors.
        let x = TrafficState::new(vec![1.0, 2.0]).unwrap();
        let traj = Trajectory {
            dt: 0.05,
            inputs: vec![ControlInput { u1: 0.0, v0: 0.0 }; 30],
            outputs: vec![x; 30],
        };
        let model = edmd_fit(&[traj], Array2::zeros((0, 2))).unwrap();
        assert!(model.rank_deficient);
    }

    #[test]
    fn edmd_predict_matches_simulation_for_exact_model() {
        let trajs: Vec<Trajectory> = (5..8).map(|s| linear_plant_trajectory(s, 60)).collect();
        let model = edmd_fit(&trajs, Array2::zeros((0, 2))).unwrap();
        let fresh = linear_plant_trajectory(99, 40);
        let u = fresh.input_matrix();
        let pred = edmd_predict(&model, fresh.outputs[0].as_slice(), u.view()).unwrap();
        let truth = fresh.output_matrix();
        let rel = fro_norm((&pred - &truth).view()) / fro_norm(truth.view());
        assert!(rel <= 1e-8, "relative prediction error {rel}");
    }

    #[test]
    fn edmd_predict_zero_dynamics() {
        let model = EdmdModel {
            a: Array2::zeros((2, 2)),
            b: Array2::zeros((2, 2)),
            c: Array2::eye(2),
            d: Array2::zeros((2, 2)),
            centers: Array2::zeros((0, 2)),
            includes_state: true,
            rank_deficient: false,
        };
        let u = Array2::zeros((3, 2));
        let pred = edmd_predict(&model, &[1.0, -2.0], u.view()).unwrap();
        assert_eq!(pred.row(0).to_vec(), vec![1.0, -2.0]);
        assert_eq!(pred.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(pred.row(2).to_vec(), vec![0.0, 0.0]);
    }
}
