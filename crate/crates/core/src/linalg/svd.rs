use super::matrix::dot;
use super::Matrix;
use crate::error::{Error, Result};

pub const SVD_MAX_SWEEPS: usize = 100;
const SVD_TOL: f64 = 1e-12;

/// Thin SVD `m = u · diag(sigma) · vᵀ` with k = min(rows, cols) triplets,
/// sigma non-increasing and the first nonzero entry of every right singular
/// vector non-negative.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_columns(&self.sigma).matmul_t(&self.v)
    }

    /// `(U_r, σ_r, V_r)` for the leading `r` triplets.
    pub fn truncate(&self, r: usize) -> (Matrix, Vec<f64>, Matrix) {
        let r = r.min(self.sigma.len());
        (self.u.columns(0, r), self.sigma[..r].to_vec(), self.v.columns(0, r))
    }

    /// `√(Σ_{j>r} σ_j²)`
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns are rotated pairwise until every pair is orthogonal to
/// `1e-12` relative; fails with [`Error::NoConvergence`] after 100 sweeps.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() >= m.cols() {
        let (u, sigma, v) = jacobi_tall(m)?;
        Ok(finish(u, sigma, v))
    } else {
        let (v, sigma, u) = jacobi_tall(&m.transpose())?;
        Ok(finish(u, sigma, v))
    }
}

/// Returns `(u, sigma, v)` for `rows >= cols`, unsorted.
fn jacobi_tall(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (rows, cols) = m.shape();
    // work on columns as contiguous rows
    let mut w = m.transpose();
    let mut vt = Matrix::identity(cols);

    let mut converged = cols < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..cols - 1 {
            for j in (i + 1)..cols {
                let (alpha, beta, gamma) = {
                    let (wi, wj) = (w.row(i), w.row(j));
                    (dot(wi, wi), dot(wj, wj), dot(wi, wj))
                };
                if gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, i, j, c, s);
                rotate_rows(&mut vt, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { algorithm: "one-sided Jacobi SVD", sweeps: SVD_MAX_SWEEPS });
    }

    let sigma: Vec<f64> = (0..cols).map(|i| dot(w.row(i), w.row(i)).sqrt()).collect();
    let mut u = Matrix::zeros(rows, cols);
    let mut missing = Vec::new();
    for (i, &s) in sigma.iter().enumerate() {
        if s > f64::MIN_POSITIVE {
            for (r, &x) in w.row(i).iter().enumerate() {
                u[(r, i)] = x / s;
            }
        } else {
            missing.push(i);
        }
    }
    complete_basis(&mut u, &missing);
    Ok((u, sigma, vt.transpose()))
}

fn rotate_rows(a: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = a.two_rows_mut(i, j);
    for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills the listed (zero) columns of `u` with unit vectors orthogonal to
/// every other column, by twice-applied Gram-Schmidt over the standard basis.
pub(crate) fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    let rows = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|c| !missing.contains(c)).collect();
    for &target in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[e] = 1.0;
            for _ in 0..2 {
                for &c in &filled {
                    let col = u.column(c);
                    let proj = dot(&col, &cand);
                    cand.iter_mut().zip(&col).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let n = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(bn, _)| n > *bn + 1e-12) {
                best = Some((n, cand));
            }
        }
        let (n, cand) = best.expect("rows > 0");
        for (r, x) in cand.iter().enumerate() {
            u[(r, target)] = x / n;
        }
        filled.push(target);
    }
}

fn finish(u: Matrix, sigma: Vec<f64>, v: Matrix) -> SvdResult {
    let k = sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut su = Matrix::zeros(u.rows(), k);
    let mut sv = Matrix::zeros(v.rows(), k);
    let mut ss = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let vcol = v.column(src);
        let scale = v.rows() as f64 * f64::EPSILON * vcol.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let flip = vcol.iter().find(|x| x.abs() > scale).is_some_and(|&x| x < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        for r in 0..u.rows() {
            su[(r, dst)] = sign * u[(r, src)];
        }
        for (r, x) in vcol.iter().enumerate() {
            sv[(r, dst)] = sign * x;
        }
        ss.push(sigma[src]);
    }
    SvdResult { u: su, sigma: ss, v: sv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn check_invariants(m: &Matrix, s: &SvdResult) {
        assert!(s.u.orthonormality_defect() < 1e-10, "u defect");
        assert!(s.v.orthonormality_defect() < 1e-10, "v defect");
        let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
        assert!(s.reconstruct().sub(m).frobenius_norm() / scale < 1e-9);
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.sigma.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn diagonal() {
        let m = Matrix::from_diag(&[1.0, 3.0, 2.0]);
        let s = svd(&m).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
        check_invariants(&m, &s);
    }

    #[test]
    fn zero_matrix() {
        let m = Matrix::zeros(4, 3);
        let s = svd(&m).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 0.0));
        assert!(s.u.orthonormality_defect() < 1e-12);
        assert!(s.v.orthonormality_defect() < 1e-12);
    }

    #[test]
    fn tall_wide_and_rank_deficient() {
        for (r, c, seed) in [(5, 4, 1u64), (4, 9, 2), (12, 12, 3)] {
            let m = gaussian_matrix(r, c, seed).unwrap();
            check_invariants(&m, &svd(&m).unwrap());
        }
        let a = gaussian_matrix(6, 2, 4).unwrap();
        let b = gaussian_matrix(2, 5, 5).unwrap();
        let low = a.matmul(&b);
        let s = svd(&low).unwrap();
        check_invariants(&low, &s);
        assert!(s.sigma[2] < 1e-12 * s.sigma[0]);
    }

    #[test]
    fn right_vectors_sign_convention() {
        let m = gaussian_matrix(7, 4, 8).unwrap();
        let s = svd(&m).unwrap();
        for j in 0..4 {
            let first = s.v.column(j).into_iter().find(|x| x.abs() > 1e-14).unwrap();
            assert!(first > 0.0);
        }
    }
}
