//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Pivot ratio below which a factorization is treated as singular.
pub const SINGULAR_PIVOT_RATIO: f64 = 1e-14;

/// Solves `a x = b` by partial-pivoting LU. Returns `None` when `a` is
/// singular or numerically close to it.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let diag = u.diagonal();
    let max = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if !(max > 0.0) || min <= SINGULAR_PIVOT_RATIO * max {
        return None;
    }
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Rank test via column-pivoted QR of `aᵀ`: every diagonal entry of `R`
/// must exceed `tol` relative to the largest.
pub fn has_full_row_rank(a: &DMatrix<f64>, tol: f64) -> bool {
    let m = a.nrows();
    if m == 0 {
        return true;
    }
    if m > a.ncols() {
        return false;
    }
    let qr = a.transpose().col_piv_qr();
    let r = qr.r();
    let largest = r[(0, 0)].abs();
    if largest == 0.0 {
        return false;
    }
    (0..m).all(|k| r[(k, k)].abs() > tol * largest.max(1.0))
}

/// Row-major copy of a matrix.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_rank_deficiency() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(!has_full_row_rank(&a, 1e-10));
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 0.0, 1.0, 2.0]);
        assert!(has_full_row_rank(&b, 1e-10));
    }

    #[test]
    fn singular_solve_returns_none() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve(&a, &DVector::from_vec(vec![1.0, 1.0])).is_none());
    }
}
