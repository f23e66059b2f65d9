//! Small dense symmetric-matrix helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{LabError, Result};

/// Tolerance for symmetry checks on covariance matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative tolerance below which a negative eigenvalue is treated as round-off.
const PSD_REL_TOL: f64 = 1e-10;

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Validates that `m` is square, finite, symmetric and positive semi-definite.
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(LabError::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("matrix entry".into()));
    }
    let asym = max_asymmetry(m);
    let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if asym > SYMMETRY_TOL * scale {
        return Err(LabError::InvalidParameter(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let min = min_eigenvalue(m);
    if min < -PSD_REL_TOL * scale {
        return Err(LabError::NotPsd(min));
    }
    Ok(())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Principal square root of a symmetric PSD matrix; eigenvalues are floored at 0.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let r = lam.max(0.0).sqrt();
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= r;
        }
    }
    symmetrize(&(scaled * v.transpose()))
}

/// Trace of the principal square root of a symmetric PSD matrix.
pub fn trace_sqrt(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum()
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(LabError::Empty("matrix with no rows".into()));
    }
    let c = rows[0].len();
    if rows.iter().any(|r| r.len() != c) {
        return Err(LabError::Format("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = sym_sqrt(&m);
        let back = &r * &r;
        for (a, b) in back.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((trace_sqrt(&m) - (1.0f64.sqrt() + 3.0f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn psd_checks() {
        let ok = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(check_psd(&ok).is_ok());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(check_psd(&neg), Err(LabError::NotPsd(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(check_psd(&asym).is_err());
    }
}
