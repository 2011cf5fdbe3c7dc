//! Dense linear-algebra kernels: SVD, rank truncation, least squares and
//! pseudoinverse.
//!
//! Every rank decision in the crate goes through [`RANK_TOL`]: singular
//! values below `RANK_TOL * sigma_max` are treated as zero. Keeping a single
//! cutoff here avoids inconsistent rank judgments between the identification
//! projectors and the controller's range-space projection.
//!
//! All computation is in `f64`. The Hankel stacks handled downstream reach
//! roughly 1080 x 1111 entries and the small singular values that separate
//! the model order from noise are lost in single precision.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{JobSvd, SVDDC};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for every rank decision.
pub const RANK_TOL: f64 = 1e-10;

/// Thin SVD of a real matrix: `a = u * diag(s) * vt`.
///
/// `u` has orthonormal columns, `vt` orthonormal rows, and `s` is
/// non-negative and non-increasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Array2<f64>,
    pub s: Array1<f64>,
    pub vt: Array2<f64>,
}

impl SvdResult {
    /// Number of singular values above `tol * s[0]`.
    pub fn rank_with_tol(&self, tol: f64) -> usize {
        let smax = self.s.first().copied().unwrap_or(0.0);
        if smax <= 0.0 {
            return 0;
        }
        self.s.iter().take_while(|&&x| x > tol * smax).count()
    }

    /// Numerical rank under the global cutoff.
    pub fn rank(&self) -> usize {
        self.rank_with_tol(RANK_TOL)
    }

    /// Reconstruct the best rank-`r` approximation `u[:, :r] s[:r] vt[:r, :]`.
    pub fn reconstruct_rank(&self, r: usize) -> Array2<f64> {
        let r = r.min(self.s.len());
        if r == 0 {
            return Array2::zeros((self.u.nrows(), self.vt.ncols()));
        }
        let mut us = self.u.slice(s![.., ..r]).to_owned();
        for (j, mut col) in us.axis_iter_mut(Axis(1)).enumerate() {
            col *= self.s[j];
        }
        us.dot(&self.vt.slice(s![..r, ..]))
    }
}

fn ensure_finite(a: &ArrayView2<f64>, context: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Param {
            name: "matrix",
            details: format!("{context}: entries must be finite"),
        })
    }
}

/// Thin singular value decomposition.
///
/// Fails with [`Error::SvdFailed`] when the underlying iterative kernel does
/// not converge; the error carries the number of unconverged superdiagonals.
pub fn svd(a: ArrayView2<f64>) -> Result<SvdResult> {
    ensure_finite(&a, "svd")?;
    let (u, s, vt) = a
        .svddc(JobSvd::Some)
        .map_err(|e| match e {
            ndarray_linalg::error::LinalgError::Lapack(lax::error::Error::LapackComputationalFailure { return_code }) => {
                Error::SvdFailed { unconverged: return_code }
            }
            other => Error::Param {
                name: "matrix",
                details: format!("svd: {other}"),
            },
        })?;
    Ok(SvdResult {
        u: u.expect("JobSvd::Some returns u"),
        s,
        vt: vt.expect("JobSvd::Some returns vt"),
    })
}

/// Best Frobenius-norm approximation of `a` with rank at most `r`
/// (Eckart–Young truncation).
pub fn truncate_rank(a: ArrayView2<f64>, r: usize) -> Result<Array2<f64>> {
    let kmax = a.nrows().min(a.ncols());
    if r < 1 || r > kmax {
        return Err(Error::Param {
            name: "r",
            details: format!("rank target {r} outside 1..={kmax}"),
        });
    }
    Ok(svd(a)?.reconstruct_rank(r))
}

/// Minimum-norm least-squares solution of `a * x = b` in the Frobenius
/// sense: among all minimizers of `||a x - b||_F`, the one of smallest norm.
pub fn least_squares(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape {
            context: "least_squares",
            details: format!("a has {} rows, b has {}", a.nrows(), b.nrows()),
        });
    }
    let dec = svd(a)?;
    let r = dec.rank();
    if r == 0 {
        return Ok(Array2::zeros((a.ncols(), b.ncols())));
    }
    // x = v[:, :r] * diag(1/s) * u[:, :r]^T * b
    let mut utb = dec.u.slice(s![.., ..r]).t().dot(&b);
    for (i, mut row) in utb.axis_iter_mut(Axis(0)).enumerate() {
        row /= dec.s[i];
    }
    Ok(dec.vt.slice(s![..r, ..]).t().dot(&utb))
}

/// Moore–Penrose pseudoinverse with relative cutoff `tol` (singular values
/// below `tol * sigma_max` are treated as zero).
pub fn pseudoinverse(a: ArrayView2<f64>, tol: f64) -> Result<Array2<f64>> {
    let dec = svd(a)?;
    let r = dec.rank_with_tol(tol);
    if r == 0 {
        return Ok(Array2::zeros((a.ncols(), a.nrows())));
    }
    let mut ut = dec.u.slice(s![.., ..r]).t().to_owned();
    for (i, mut row) in ut.axis_iter_mut(Axis(0)).enumerate() {
        row /= dec.s[i];
    }
    Ok(dec.vt.slice(s![..r, ..]).t().dot(&ut))
}

/// Numerical rank under the global cutoff.
pub fn rank(a: ArrayView2<f64>) -> Result<usize> {
    Ok(svd(a)?.rank())
}

/// Orthonormal basis for the row space, returned with basis vectors as rows.
pub fn row_space_basis(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let dec = svd(a)?;
    let r = dec.rank();
    Ok(dec.vt.slice(s![..r, ..]).to_owned())
}

/// Orthonormal basis for the column space, returned with basis vectors as
/// columns.
pub fn column_space_basis(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let dec = svd(a)?;
    let r = dec.rank();
    Ok(dec.u.slice(s![.., ..r]).to_owned())
}

/// Orthonormal basis for the null space, returned with basis vectors as
/// columns (`a * z` is zero for every column `z`). The basis can be empty.
pub fn null_space_basis(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    // The thin SVD only carries min(m, n) right vectors; a full set of right
    // vectors is needed when a is wide.
    ensure_finite(&a, "null_space_basis")?;
    let (_, sv, vt) = a
        .svddc(JobSvd::All)
        .map_err(|e| Error::Param {
            name: "matrix",
            details: format!("svd: {e}"),
        })?;
    let vt = vt.expect("JobSvd::All returns vt");
    let smax = sv.first().copied().unwrap_or(0.0);
    let r = if smax <= 0.0 {
        0
    } else {
        sv.iter().take_while(|&&x| x > RANK_TOL * smax).count()
    };
    Ok(vt.slice(s![r.., ..]).t().to_owned())
}

/// Frobenius norm.
pub fn fro_norm(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Stack matrices with equal column counts on top of each other.
pub fn vstack(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    assert!(!parts.is_empty());
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut at = 0;
    for p in parts {
        assert_eq!(p.ncols(), cols, "vstack: column counts differ");
        out.slice_mut(s![at..at + p.nrows(), ..]).assign(p);
        at += p.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
    }

    #[test]
    fn svd_identity_singular_values_are_ones() {
        let dec = svd(Array2::<f64>::eye(3).view()).unwrap();
        for v in dec.s.iter() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_diagonal_case() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let dec = svd(a.view()).unwrap();
        assert!((dec.s[0] - 3.0).abs() < 1e-14);
        assert!((dec.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let a = random_matrix(20, 15, 1);
        let dec = svd(a.view()).unwrap();
        let rec = dec.reconstruct_rank(15);
        let rel = fro_norm((&a - &rec).view()) / fro_norm(a.view());
        assert!(rel <= 1e-10, "relative reconstruction error {rel}");
        // Orthonormality of the factors.
        let utu = dec.u.t().dot(&dec.u);
        let vvt = dec.vt.dot(&dec.vt.t());
        assert!(fro_norm((&utu - &Array2::<f64>::eye(15)).view()) < 1e-12);
        assert!(fro_norm((&vvt - &Array2::<f64>::eye(15)).view()) < 1e-12);
        // Non-increasing singular values.
        for w in dec.s.as_slice().unwrap().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let a = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(svd(a.view()).is_err());
    }

    #[test]
    fn truncate_keeps_rank_one_matrix() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let t = truncate_rank(a.view(), 1).unwrap();
        assert!(fro_norm((&a - &t).view()) < 1e-12);
    }

    #[test]
    fn truncate_diagonal_dominant_direction() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let t = truncate_rank(a.view(), 1).unwrap();
        let expect = array![[3.0, 0.0], [0.0, 0.0]];
        assert!(fro_norm((&expect - &t).view()) < 1e-12);
    }

    #[test]
    fn truncate_error_equals_tail_singular_values() {
        let a = random_matrix(10, 8, 2);
        let t = truncate_rank(a.view(), 3).unwrap();
        let err = fro_norm((&a - &t).view());
        let dec = svd(a.view()).unwrap();
        let tail: f64 = dec.s.iter().skip(3).map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-10, "err {err} tail {tail}");
    }

    #[test]
    fn truncate_is_idempotent() {
        let a = random_matrix(9, 7, 3);
        let t1 = truncate_rank(a.view(), 4).unwrap();
        let t2 = truncate_rank(t1.view(), 4).unwrap();
        assert!(fro_norm((&t1 - &t2).view()) <= 1e-12 * fro_norm(t1.view()));
    }

    #[test]
    fn truncate_rejects_bad_rank() {
        let a = random_matrix(4, 5, 4);
        assert!(truncate_rank(a.view(), 0).is_err());
        assert!(truncate_rank(a.view(), 5).is_err());
    }

    #[test]
    fn least_squares_identity_returns_rhs() {
        let b = random_matrix(6, 3, 5);
        let x = least_squares(Array2::<f64>::eye(6).view(), b.view()).unwrap();
        assert!(fro_norm((&x - &b).view()) < 1e-12);
    }

    #[test]
    fn least_squares_consistent_overdetermined_is_exact() {
        let a = random_matrix(12, 4, 6);
        let x_true = random_matrix(4, 2, 7);
        let b = a.dot(&x_true);
        let x = least_squares(a.view(), b.view()).unwrap();
        assert!(fro_norm((&x - &x_true).view()) < 1e-10);
        let resid = a.dot(&x) - &b;
        assert!(fro_norm(resid.view()) < 1e-10);
    }

    #[test]
    fn least_squares_rank_deficient_minimum_norm() {
        // a has two identical columns: rank 2 out of 3.
        let base = random_matrix(10, 2, 8);
        let mut a = Array2::zeros((10, 3));
        a.slice_mut(s![.., 0..2]).assign(&base);
        a.column_mut(2).assign(&base.column(0));
        let b = random_matrix(10, 2, 9);
        let x = least_squares(a.view(), b.view()).unwrap();
        // Normal equations hold.
        let ne = a.t().dot(&(a.dot(&x) - &b));
        assert!(fro_norm(ne.view()) <= 1e-8 * fro_norm(a.view()) * fro_norm(b.view()));
        // Minimum norm: any other solution of the normal equations is longer.
        // Solutions differ by null-space elements; col0 == col2 gives the
        // direction (1, 0, -1).
        let mut z = Array2::zeros((3, 2));
        z[[0, 0]] = 1.0;
        z[[2, 0]] = -1.0;
        for t in [-0.5, 0.3, 1.0] {
            let alt = &x + &(&z * t);
            assert!(fro_norm(alt.view()) >= fro_norm(x.view()) - 1e-12);
        }
    }

    #[test]
    fn least_squares_residual_orthogonal_to_range() {
        let a = random_matrix(15, 6, 10);
        let b = random_matrix(15, 4, 11);
        let x = least_squares(a.view(), b.view()).unwrap();
        let ortho = a.t().dot(&(a.dot(&x) - &b));
        assert!(fro_norm(ortho.view()) <= 1e-8 * fro_norm(a.view()) * fro_norm(b.view()));
    }

    #[test]
    fn pseudoinverse_matches_inverse_for_invertible() {
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let p = pseudoinverse(a.view(), RANK_TOL).unwrap();
        let inv = array![[0.6, -0.2], [-0.2, 0.4]];
        assert!(fro_norm((&p - &inv).view()) < 1e-12);
    }

    #[test]
    fn pseudoinverse_of_zero_is_zero() {
        let a = Array2::zeros((3, 5));
        let p = pseudoinverse(a.view(), RANK_TOL).unwrap();
        assert_eq!(p.shape(), &[5, 3]);
        assert_eq!(fro_norm(p.view()), 0.0);
    }

    #[test]
    fn pseudoinverse_moore_penrose_residuals() {
        let a = random_matrix(12, 5, 12);
        let p = pseudoinverse(a.view(), RANK_TOL).unwrap();
        let apa = a.dot(&p).dot(&a);
        let pap = p.dot(&a).dot(&p);
        let ap = a.dot(&p);
        let pa = p.dot(&a);
        assert!(fro_norm((&apa - &a).view()) <= 1e-8);
        assert!(fro_norm((&pap - &p).view()) <= 1e-8);
        assert!(fro_norm((&ap - &ap.t()).view()) <= 1e-8);
        assert!(fro_norm((&pa - &pa.t()).view()) <= 1e-8);
    }

    #[test]
    fn null_space_annihilates() {
        let a = random_matrix(4, 9, 13);
        let z = null_space_basis(a.view()).unwrap();
        assert_eq!(z.ncols(), 5);
        assert!(fro_norm(a.dot(&z).view()) < 1e-10);
        let ztz = z.t().dot(&z);
        assert!(fro_norm((&ztz - &Array2::<f64>::eye(5)).view()) < 1e-12);
    }
}
