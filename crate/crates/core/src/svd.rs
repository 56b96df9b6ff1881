//! Truncated SVD and the balanced square-root split that turns an edited
//! dense delta back into LoRA factors.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::svd::{svd, svd_scratch, ComputeSvdVectors};
use faer::diag::Diag;
use faer::{Mat, Par};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::all_finite;

/// Top-`r` singular triplets of an `m × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// `m × r`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Descending, non-negative.
    pub singular_values: DVector<f64>,
    /// `n × r`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U_r · diag(S_r) · V_rᵀ`
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (mut col, &s) in us.column_iter_mut().zip(self.singular_values.iter()) {
            col *= s;
        }
        us * self.v.transpose()
    }
}

/// Full thin decomposition via faer, run sequentially so the result does not
/// depend on the surrounding thread pool.
fn thin_svd(matrix: &DMatrix<f64>) -> Result<(Mat<f64>, Diag<f64>, Mat<f64>)> {
    let (rows, cols) = matrix.shape();
    let size = rows.min(cols);
    let a = Mat::<f64>::from_fn(rows, cols, |i, j| matrix[(i, j)]);
    let mut u = Mat::<f64>::zeros(rows, size);
    let mut v = Mat::<f64>::zeros(cols, size);
    let mut s = Diag::<f64>::zeros(size);
    let mut scratch = MemBuffer::new(svd_scratch::<f64>(
        rows,
        cols,
        ComputeSvdVectors::Thin,
        ComputeSvdVectors::Thin,
        Par::Seq,
        Default::default(),
    ));
    svd(
        a.as_ref(),
        s.as_mut(),
        Some(u.as_mut()),
        Some(v.as_mut()),
        Par::Seq,
        MemStack::new(&mut scratch),
        Default::default(),
    )
    .map_err(|e| Error::NoConvergence(format!("{rows}×{cols} SVD: {e:?}")))?;
    Ok((u, s, v))
}

/// Computes the top-`rank` singular triplets of `matrix`.
///
/// Within each pair `(uᵢ, vᵢ)` the entry of `uᵢ` with the largest magnitude is
/// made non-negative, which makes the result unique when singular values are
/// distinct.
pub fn svd_truncate(matrix: &DMatrix<f64>, rank: usize) -> Result<TruncatedSvd> {
    let (rows, cols) = matrix.shape();
    let max = rows.min(cols);
    if rank == 0 || rank > max {
        return Err(Error::RankTooLarge { rank, max });
    }
    if !all_finite(matrix) {
        return Err(Error::NonFiniteInput("svd input has non-finite entries".into()));
    }

    let (u_full, s_full, v_full) = thin_svd(matrix)?;
    let values: Vec<f64> = (0..max).map(|i| s_full[i]).collect();
    if !values.iter().all(|s| s.is_finite()) {
        return Err(Error::NoConvergence(format!("{rows}×{cols} SVD produced non-finite values")));
    }

    let mut order: Vec<usize> = (0..max).collect();
    // Stable: equal singular values keep the decomposition's own order.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(rank);

    let mut u = DMatrix::zeros(rows, rank);
    let mut v = DMatrix::zeros(cols, rank);
    let mut s = DVector::zeros(rank);
    for (k, &idx) in order.iter().enumerate() {
        let mut ucol = DVector::from_fn(rows, |i, _| u_full[(i, idx)]);
        let mut vcol = DVector::from_fn(cols, |i, _| v_full[(i, idx)]);
        let pivot = ucol.iamax();
        if ucol[pivot] < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u.set_column(k, &ucol);
        v.set_column(k, &vcol);
        s[k] = values[idx].max(0.0);
    }
    Ok(TruncatedSvd {
        u,
        singular_values: s,
        v,
    })
}

/// Balanced factors `B̂ = U_r·diag(√S_r)` (`m × r`) and `Â = diag(√S_r)·V_rᵀ` (`r × n`).
pub fn sqrt_split(svd: &TruncatedSvd) -> (DMatrix<f64>, DMatrix<f64>) {
    let root = svd.singular_values.map(f64::sqrt);
    let mut b_hat = svd.u.clone();
    for (mut col, &w) in b_hat.column_iter_mut().zip(root.iter()) {
        col *= w;
    }
    let mut a_hat = svd.v.transpose();
    for (mut row, &w) in a_hat.row_iter_mut().zip(root.iter()) {
        row *= w;
    }
    (b_hat, a_hat)
}

/// Truncates and splits in one call.
pub fn factorize(matrix: &DMatrix<f64>, rank: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok(sqrt_split(&svd_truncate(matrix, rank)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let svd = svd_truncate(&m, 1).unwrap();
        assert!((svd.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((svd.u[(0, 0)] - 1.0).abs() < 1e-12 && svd.u[(1, 0)].abs() < 1e-12);
        assert!((svd.v[(0, 0)] - 1.0).abs() < 1e-12 && svd.v[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let m = DMatrix::<f64>::zeros(4, 3);
        let svd = svd_truncate(&m, 2).unwrap();
        assert!(svd.singular_values.iter().all(|&s| s == 0.0));
        assert_eq!(svd.reconstruct(), DMatrix::zeros(4, 3));
        let (b, a) = sqrt_split(&svd);
        assert!(b.iter().all(|&x| x == 0.0) && a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rank_bounds() {
        let m = DMatrix::<f64>::identity(3, 5);
        assert!(matches!(svd_truncate(&m, 4), Err(Error::RankTooLarge { rank: 4, max: 3 })));
        assert!(matches!(svd_truncate(&m, 0), Err(Error::RankTooLarge { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(1, 2)] = f64::NAN;
        assert!(matches!(svd_truncate(&m, 1), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn balanced_split_norms() {
        let svd = TruncatedSvd {
            u: DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]),
            singular_values: DVector::from_vec(vec![4.0]),
            v: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        };
        let (b, a) = sqrt_split(&svd);
        assert!((b.column(0).norm() - 2.0).abs() < 1e-15);
        assert!((a.row(0).norm() - 2.0).abs() < 1e-15);
        assert!((&b * &a - svd.reconstruct()).norm() < 1e-15);
    }

    #[test]
    fn sign_convention_and_order() {
        let m = DMatrix::from_row_slice(3, 3, &[-1.0, 0.2, 0.0, 0.1, -5.0, 0.3, 0.0, 0.4, 2.0]);
        let svd = svd_truncate(&m, 3).unwrap();
        for k in 0..3 {
            let col = svd.u.column(k);
            assert!(col[col.iamax()] >= 0.0);
        }
        assert!(svd.singular_values[0] >= svd.singular_values[1]);
        assert!(svd.singular_values[1] >= svd.singular_values[2]);
        assert!((svd.reconstruct() - &m).norm() < 1e-12);
    }
}
