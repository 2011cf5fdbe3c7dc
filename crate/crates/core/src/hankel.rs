//! Block-Hankel trajectory libraries.
//!
//! A length-`T` vector signal `w(0), ..., w(T-1)` with `q` entries per sample
//! is arranged into the depth-`L` block-Hankel matrix
//!
//! ```text
//! H_L(w) = [ w(0)   w(1)   ...  w(T-L)   ]
//!          [ w(1)   w(2)   ...  w(T-L+1) ]
//!          [ ...                          ]
//!          [ w(L-1) w(L)   ...  w(T-1)   ]
//! ```
//!
//! with `q * L` rows and `T - L + 1` columns. Each column is a length-`L`
//! window of the signal, so the matrix doubles as a library of trajectory
//! snippets. The module provides construction, the past/future row split,
//! excitation (row-rank) checks, a least-squares membership test for
//! candidate trajectories, and the orthogonal projection onto the
//! block-Hankel subspace used by the identification loop.
//!
//! Rank checks are tolerance-based through [`crate::numerics::RANK_TOL`];
//! on floating-point data "full row rank" always means "no singular value
//! below the global relative cutoff".

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numerics;

/// A block-Hankel matrix together with its block layout.
#[derive(Debug, Clone)]
pub struct BlockHankel {
    /// The assembled matrix, `block_size * depth` rows by `width` columns.
    pub matrix: Array2<f64>,
    /// Rows per time step.
    pub block_size: usize,
    /// Number of block rows (the window length `L`).
    pub depth: usize,
    /// Number of columns (`T - L + 1`).
    pub width: usize,
}

impl BlockHankel {
    /// Rows of block row `i` as a view.
    pub fn block_row(&self, i: usize) -> ArrayView2<'_, f64> {
        let lo = i * self.block_size;
        self.matrix.slice(s![lo..lo + self.block_size, ..])
    }
}

/// Row split of a [`BlockHankel`] into its first `t_ini` and last `n_future`
/// block rows.
#[derive(Debug, Clone)]
pub struct HankelPartition {
    pub past: Array2<f64>,
    pub future: Array2<f64>,
    pub t_ini: usize,
    pub n_future: usize,
}

/// Build the depth-`L` block-Hankel matrix of a signal given as one sample
/// per row.
pub fn build_hankel(w: ArrayView2<f64>, depth: usize) -> Result<BlockHankel> {
    let t = w.nrows();
    let q = w.ncols();
    if depth < 1 {
        return Err(Error::Param {
            name: "depth",
            details: "depth must be at least 1".into(),
        });
    }
    if t < depth {
        return Err(Error::InsufficientData { len: t, required: depth });
    }
    let width = t - depth + 1;
    let mut matrix = Array2::zeros((q * depth, width));
    for i in 0..depth {
        for j in 0..width {
            matrix
                .slice_mut(s![i * q..(i + 1) * q, j])
                .assign(&w.row(i + j));
        }
    }
    Ok(BlockHankel {
        matrix,
        block_size: q,
        depth,
        width,
    })
}

/// Recover the generating signal from a block-Hankel matrix: first column
/// followed by the trailing rows of the last block row.
pub fn flatten_hankel(h: &BlockHankel) -> Array2<f64> {
    let t = h.depth + h.width - 1;
    let mut w = Array2::zeros((t, h.block_size));
    for k in 0..h.depth {
        w.row_mut(k)
            .assign(&h.matrix.slice(s![k * h.block_size..(k + 1) * h.block_size, 0]));
    }
    let last = h.block_row(h.depth - 1);
    for j in 1..h.width {
        w.row_mut(h.depth - 1 + j).assign(&last.column(j));
    }
    w
}

/// Persistent excitation of order `depth`: the associated Hankel matrix has
/// full row rank under the global cutoff.
pub fn is_persistently_exciting(w: ArrayView2<f64>, depth: usize) -> Result<bool> {
    let h = build_hankel(w, depth)?;
    Ok(numerics::rank(h.matrix.view())? == h.matrix.nrows())
}

/// Split a Hankel matrix into its first `t_ini` and last `n_future` block
/// rows. The two counts must cover the depth exactly.
pub fn partition(h: &BlockHankel, t_ini: usize, n_future: usize) -> Result<HankelPartition> {
    if t_ini + n_future != h.depth {
        return Err(Error::Param {
            name: "t_ini",
            details: format!(
                "t_ini ({t_ini}) + n_future ({n_future}) must equal depth ({})",
                h.depth
            ),
        });
    }
    let cut = t_ini * h.block_size;
    Ok(HankelPartition {
        past: h.matrix.slice(s![..cut, ..]).to_owned(),
        future: h.matrix.slice(s![cut.., ..]).to_owned(),
        t_ini,
        n_future,
    })
}

/// Lifted-excitation check: the input Hankel matrix stacked over the lifted
/// initial states `lift(x(0)), ..., lift(x(n_d - depth))` must have full row
/// rank.
///
/// `u` carries one input sample per row, `x` one state per row, and `lift`
/// maps a state to its lifted coordinates.
pub fn check_lifted_excitation<F>(
    u: ArrayView2<f64>,
    x: ArrayView2<f64>,
    lift: F,
    depth: usize,
) -> Result<bool>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if u.nrows() != x.nrows() {
        return Err(Error::Shape {
            context: "check_lifted_excitation",
            details: format!("u has {} samples, x has {}", u.nrows(), x.nrows()),
        });
    }
    let hu = build_hankel(u, depth)?;
    let first = lift(x.row(0).as_slice().expect("contiguous row"));
    let n_z = first.len();
    let rows = hu.matrix.nrows() + n_z;
    if hu.width < rows {
        // Too few columns for full row rank.
        return Ok(false);
    }
    let mut stacked = Array2::zeros((rows, hu.width));
    stacked.slice_mut(s![..hu.matrix.nrows(), ..]).assign(&hu.matrix);
    for j in 0..hu.width {
        let lifted = if j == 0 {
            first.clone()
        } else {
            lift(x.row(j).as_slice().expect("contiguous row"))
        };
        if lifted.len() != n_z {
            return Err(Error::Shape {
                context: "check_lifted_excitation",
                details: "lift must return a fixed-length vector".into(),
            });
        }
        stacked
            .slice_mut(s![hu.matrix.nrows().., j])
            .assign(&Array1::from(lifted));
    }
    Ok(numerics::rank(stacked.view())? == rows)
}

/// Least-squares membership residual of a candidate trajectory against the
/// library `col(H_u, H_y)`.
///
/// Returns `||col(H_u, H_y) g* - traj||_2 / max(||traj||_2, 1)` where `g*`
/// is the least-squares minimizer. A residual at rounding level certifies
/// that the candidate lies in the span of the library columns.
pub fn membership_residual(
    h_u: &BlockHankel,
    h_y: &BlockHankel,
    traj: &Array1<f64>,
) -> Result<f64> {
    if h_u.width != h_y.width || h_u.depth != h_y.depth {
        return Err(Error::Shape {
            context: "membership_residual",
            details: "input and output Hankel matrices must share depth and width".into(),
        });
    }
    let rows = (h_u.block_size + h_y.block_size) * h_u.depth;
    if traj.len() != rows {
        return Err(Error::Shape {
            context: "membership_residual",
            details: format!("trajectory length {} != stacked rows {rows}", traj.len()),
        });
    }
    let mut stacked = Array2::zeros((rows, h_u.width));
    stacked
        .slice_mut(s![..h_u.matrix.nrows(), ..])
        .assign(&h_u.matrix);
    stacked
        .slice_mut(s![h_u.matrix.nrows().., ..])
        .assign(&h_y.matrix);
    let rhs = traj
        .view()
        .insert_axis(Axis(1))
        .to_owned();
    let g = numerics::least_squares(stacked.view(), rhs.view())?;
    let resid = stacked.dot(&g) - &rhs;
    let num = numerics::fro_norm(resid.view());
    let den = traj.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    Ok(num / den)
}

/// Orthogonal projection onto the block-Hankel subspace: every block
/// anti-diagonal (blocks `(i, j)` with equal `i + j`) is replaced by the
/// arithmetic mean of its members. With uniform weights this is the closest
/// block-Hankel matrix in Frobenius norm.
pub fn hankel_project(m: ArrayView2<f64>, block_size: usize) -> Result<Array2<f64>> {
    if block_size == 0 || m.nrows() % block_size != 0 {
        return Err(Error::Param {
            name: "block_size",
            details: format!("rows {} not divisible by block size {block_size}", m.nrows()),
        });
    }
    let depth = m.nrows() / block_size;
    let width = m.ncols();
    let n_diag = depth + width - 1;
    // Sum and count per (anti-diagonal, intra-block row).
    let mut sums = Array2::<f64>::zeros((n_diag, block_size));
    let mut counts = vec![0usize; n_diag];
    for i in 0..depth {
        for j in 0..width {
            let d = i + j;
            counts[d] += 1;
            for r in 0..block_size {
                sums[[d, r]] += m[[i * block_size + r, j]];
            }
        }
    }
    let mut out = Array2::zeros(m.raw_dim());
    for i in 0..depth {
        for j in 0..width {
            let d = i + j;
            let c = counts[d] as f64;
            for r in 0..block_size {
                out[[i * block_size + r, j]] = sums[[d, r]] / c;
            }
        }
    }
    Ok(out)
}
