//! Reference computations through nalgebra, used only by tests.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::linalg::Matrix;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::new(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec()).unwrap()
}

/// Singular values, descending.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn tail(m: &Matrix, r: usize) -> f64 {
    singular_values(m).iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}

/// Symmetric PSD square root with eigenvalues clamped at 0.
pub fn sqrtm(s: &Matrix) -> Matrix {
    let e = SymmetricEigen::new(to_na(s));
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    from_na(&(&e.eigenvectors * d * e.eigenvectors.transpose()))
}
