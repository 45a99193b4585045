use super::matrix::dot;
use super::Matrix;
use crate::error::{Error, Result};

/// Thin QR factors: `q` is m×k with orthonormal columns, `r` is k×n upper
/// triangular (trapezoidal when m < n), k = min(m, n).
#[derive(Debug, Clone)]
pub struct ThinQrResult {
    pub q: Matrix,
    pub r: Matrix,
}

/// Thin Householder QR of a matrix with `rows >= cols`, with `R` diagonal
/// made non-negative.
pub fn thin_qr(m: &Matrix) -> Result<ThinQrResult> {
    if m.rows() < m.cols() {
        return Err(Error::shape(format!(
            "thin_qr needs rows >= cols, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(householder_qr(m))
}

/// Householder QR for any shape: `q` is m×k, `r` is k×n with k = min(m, n).
///
/// Used where a tall-or-wide reduction is needed (a stacked error with fewer
/// rows than input features reduces to an m×d core).
pub fn householder_qr(m: &Matrix) -> ThinQrResult {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    let mut a = m.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);

    for j in 0..k {
        let v = householder_vector(&a, j, j);
        if let Some(v) = &v {
            apply_reflector_left(&mut a, v, j, j);
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(k, cols);
    for i in 0..k {
        for jj in i..cols {
            r[(i, jj)] = a[(i, jj)];
        }
    }

    let mut q = Matrix::zeros(rows, k);
    for i in 0..k {
        q[(i, i)] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        if let Some(v) = v {
            apply_reflector_left(&mut q, v, j, 0);
        }
    }

    for i in 0..k {
        if r[(i, i)] < 0.0 {
            for v in r.row_mut(i) {
                *v = -*v;
            }
            for row in 0..rows {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    ThinQrResult { q, r }
}

/// Unit Householder vector zeroing `a[start+1.., col]`; `None` when the
/// sub-column is already zero.
fn householder_vector(a: &Matrix, start: usize, col: usize) -> Option<Vec<f64>> {
    let x: Vec<f64> = (start..a.rows()).map(|i| a[(i, col)]).collect();
    let norm = dot(&x, &x).sqrt();
    if norm == 0.0 {
        return None;
    }
    let alpha = if x[0] >= 0.0 { -norm } else { norm };
    let mut v = x;
    v[0] -= alpha;
    let vnorm = dot(&v, &v).sqrt();
    if vnorm == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|e| *e /= vnorm);
    Some(v)
}

/// `a[start.., col_from..] -= 2 v (vᵀ a[start.., col_from..])`
fn apply_reflector_left(a: &mut Matrix, v: &[f64], start: usize, col_from: usize) {
    let cols = a.cols();
    let mut w = vec![0.0; cols - col_from];
    for (offset, &vi) in v.iter().enumerate() {
        let row = &a.row(start + offset)[col_from..];
        for (wj, &x) in w.iter_mut().zip(row) {
            *wj += vi * x;
        }
    }
    for (offset, &vi) in v.iter().enumerate() {
        let row = &mut a.row_mut(start + offset)[col_from..];
        for (x, &wj) in row.iter_mut().zip(&w) {
            *x -= 2.0 * vi * wj;
        }
    }
}

/// Orthonormal basis for the column space of `y`.
///
/// Householder QR with column pivoting; trailing columns whose pivoted `R`
/// diagonal falls below `max(rows, cols) · ε · |R₀₀|` are dropped, so the
/// output can have fewer columns than `y`. Errors when `y` has numerical
/// rank zero or fewer rows than columns.
pub fn orth(y: &Matrix) -> Result<Matrix> {
    let (rows, cols) = y.shape();
    if rows < cols {
        return Err(Error::shape(format!("orth needs rows >= cols, got {rows}x{cols}")));
    }
    let mut a = y.clone();
    let mut col_norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a[(i, j)].powi(2)).sum())
        .collect();
    let mut reflectors = Vec::with_capacity(cols);
    let mut diag = Vec::with_capacity(cols);

    for j in 0..cols {
        // pivot: largest remaining column norm, lowest index on ties
        let (p, _) = col_norms[j..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &n)| if n > best.1 { (i, n) } else { best });
        let p = p + j;
        if p != j {
            col_norms.swap(j, p);
            for i in 0..rows {
                let t = a[(i, j)];
                a[(i, j)] = a[(i, p)];
                a[(i, p)] = t;
            }
        }
        let v = householder_vector(&a, j, j);
        if let Some(v) = &v {
            apply_reflector_left(&mut a, v, j, j);
        }
        diag.push(a[(j, j)].abs());
        reflectors.push(v);
        // recompute remaining norms exactly; desk-scale sizes make downdating unnecessary
        for (jj, n) in col_norms.iter_mut().enumerate().skip(j + 1) {
            *n = ((j + 1)..rows).map(|i| a[(i, jj)].powi(2)).sum();
        }
    }

    let lead = diag.first().copied().unwrap_or(0.0);
    if lead == 0.0 {
        return Err(Error::invalid("orth input has numerical rank zero"));
    }
    let tol = rows.max(cols) as f64 * f64::EPSILON * lead;
    let rank = diag.iter().take_while(|&&d| d > tol).count();

    let mut q = Matrix::zeros(rows, rank);
    for i in 0..rank {
        q[(i, i)] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().take(rank).rev() {
        if let Some(v) = v {
            apply_reflector_left(&mut q, v, j, 0);
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn projector(q: &Matrix) -> Matrix {
        q.matmul_t(q)
    }

    #[test]
    fn identity_factorizes_trivially() {
        let qr = thin_qr(&Matrix::identity(3)).unwrap();
        assert_eq!(qr.q, Matrix::identity(3));
        assert_eq!(qr.r, Matrix::identity(3));
    }

    #[test]
    fn column_vector() {
        let m = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let qr = thin_qr(&m).unwrap();
        assert!((qr.q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((qr.q[(1, 0)] - 0.8).abs() < 1e-15);
        assert!((qr.r[(0, 0)] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn wide_input_rejected() {
        assert!(matches!(thin_qr(&Matrix::zeros(2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn random_tall_reconstructs() {
        let m = gaussian_matrix(8, 3, 11).unwrap();
        let qr = thin_qr(&m).unwrap();
        assert!(qr.q.orthonormality_defect() < 1e-10);
        let rel = qr.q.matmul(&qr.r).sub(&m).frobenius_norm() / m.frobenius_norm();
        assert!(rel < 1e-10);
        for i in 0..3 {
            assert!(qr.r[(i, i)] >= 0.0);
            for j in 0..i {
                assert_eq!(qr.r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn wide_householder_reconstructs() {
        let m = gaussian_matrix(3, 7, 5).unwrap();
        let qr = householder_qr(&m);
        assert_eq!(qr.q.shape(), (3, 3));
        assert_eq!(qr.r.shape(), (3, 7));
        assert!(qr.q.matmul(&qr.r).max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn orth_keeps_span_of_orthonormal_input() {
        let q0 = thin_qr(&gaussian_matrix(6, 3, 1).unwrap()).unwrap().q;
        let q = orth(&q0).unwrap();
        assert_eq!(q.cols(), 3);
        assert!(projector(&q).max_abs_diff(&projector(&q0)) < 1e-10);
    }

    #[test]
    fn orth_drops_duplicated_column() {
        let y = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![-1.0, -1.0],
            vec![0.5, 0.5],
        ])
        .unwrap();
        assert_eq!(orth(&y).unwrap().cols(), 1);
    }

    #[test]
    fn orth_keeps_later_independent_columns() {
        // [a, a, b]: the dependent middle column must not cost b its span
        let a = gaussian_matrix(5, 1, 3).unwrap();
        let b = gaussian_matrix(5, 1, 4).unwrap();
        let y = Matrix::hstack(&[&a, &a, &b]).unwrap();
        let q = orth(&y).unwrap();
        assert_eq!(q.cols(), 2);
        let resid = b.sub(&projector(&q).matmul(&b)).frobenius_norm();
        assert!(resid < 1e-12);
    }

    #[test]
    fn orth_random_is_orthonormal() {
        let q = orth(&gaussian_matrix(16, 4, 77).unwrap()).unwrap();
        assert_eq!(q.cols(), 4);
        assert!(q.orthonormality_defect() < 1e-10);
    }

    #[test]
    fn orth_zero_errors() {
        assert!(orth(&Matrix::zeros(4, 2)).is_err());
    }
}
