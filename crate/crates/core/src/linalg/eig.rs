use super::svd::svd;
use super::Matrix;
use crate::error::{Error, Result};

const EIG_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix: `vectors` has orthonormal columns,
/// `values` is non-increasing.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub vectors: Matrix,
    pub values: Vec<f64>,
}

impl SymEigResult {
    pub fn reconstruct(&self) -> Matrix {
        self.vectors.scale_columns(&self.values).matmul_t(&self.vectors)
    }

    /// `V · diag(f(λ)) · Vᵀ`
    pub fn apply_spectral(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        self.vectors.scale_columns(&mapped).matmul_t(&self.vectors)
    }
}

fn check_symmetric(s: &Matrix) -> Result<()> {
    if !s.is_square() {
        return Err(Error::shape(format!("expected square matrix, got {:?}", s.shape())));
    }
    let deviation = s.asymmetry();
    if deviation > SYMMETRY_TOL * s.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { deviation });
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(s: &Matrix) -> Result<SymEigResult> {
    check_symmetric(s)?;
    let n = s.rows();
    let mut a = s.symmetrize();
    // eigenvectors are accumulated as rows of vt
    let mut vt = Matrix::identity(n);
    let norm = a.frobenius_norm();
    let threshold = 1e-15 * norm;

    let mut converged = n < 2 || norm == 0.0;
    for _ in 0..EIG_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= threshold {
                    continue;
                }
                rotated = true;
                let (app, aqq) = (a[(p, p)], a[(q, q)]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 { 1.0 } else { -1.0 } / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate_pair(&mut a, p, q, c, sn);
                // mirror the rotated rows into the columns, then fix the 2x2 block
                for k in 0..n {
                    if k != p && k != q {
                        a[(k, p)] = a[(p, k)];
                        a[(k, q)] = a[(q, k)];
                    }
                }
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                rotate_pair(&mut vt, p, q, c, sn);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { algorithm: "cyclic Jacobi eigensolver", sweeps: EIG_MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]).then(x.cmp(&y)));
    let mut vectors = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let col = vt.row(src);
        let scale = n as f64 * f64::EPSILON;
        let flip = col.iter().find(|x| x.abs() > scale).is_some_and(|&x| x < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        for (r, x) in col.iter().enumerate() {
            vectors[(r, dst)] = sign * x;
        }
        values.push(a[(src, src)]);
    }
    Ok(SymEigResult { vectors, values })
}

/// Rows `p`, `q` ← `[c −s; s c]` applied on the left.
fn rotate_pair(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let (rp, rq) = m.two_rows_mut(p, q);
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Which root of a PSD matrix to form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootMode {
    Sqrt,
    InvSqrt,
}

/// Default relative rank tolerance: `max(rows, cols) · 2⁻⁵²`.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON
}

/// Both roots of a PSD matrix from one eigendecomposition.
#[derive(Debug, Clone)]
pub struct PsdRoots {
    pub sqrt: Matrix,
    /// Pseudoinverse square root: eigenvalues at or below the rank cut map to 0.
    pub inv_sqrt: Matrix,
    /// Orthogonal projector onto the retained eigenspace.
    pub range_projector: Matrix,
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
}

/// Eigenvalues of `s` after the PSD checks, clamped at 0.
fn psd_eig(s: &Matrix) -> Result<(SymEigResult, f64)> {
    let mut eig = sym_eig(s)?;
    let lambda_max = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let lambda_min = eig.values.last().copied().unwrap_or(0.0);
    if lambda_min < -1e-6 * lambda_max || (lambda_max == 0.0 && lambda_min < -1e-10) {
        return Err(Error::NotPsd { min_eigenvalue: lambda_min });
    }
    eig.values.iter_mut().for_each(|l| *l = l.max(0.0));
    Ok((eig, lambda_max))
}

/// `rank_tol` is relative to the largest eigenvalue; `None` picks
/// [`default_rank_tol`]. Eigenvalues at or below the cut are dropped from
/// both roots, so `sqrt · inv_sqrt` is exactly the range projector.
pub fn psd_roots(s: &Matrix, rank_tol: Option<f64>) -> Result<PsdRoots> {
    let (eig, lambda_max) = psd_eig(s)?;
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(s.rows(), s.cols())) * lambda_max;
    let keep = |l: f64| l > tol && l > 0.0;
    let rank = eig.values.iter().filter(|&&l| keep(l)).count();
    Ok(PsdRoots {
        sqrt: eig.apply_spectral(|l| if keep(l) { l.sqrt() } else { 0.0 }),
        inv_sqrt: eig.apply_spectral(|l| if keep(l) { 1.0 / l.sqrt() } else { 0.0 }),
        range_projector: eig.apply_spectral(|l| if keep(l) { 1.0 } else { 0.0 }),
        eigenvalues: eig.values,
        rank,
    })
}

/// Square root or pseudoinverse square root of a symmetric PSD matrix.
pub fn psd_sqrt(s: &Matrix, mode: RootMode, rank_tol: Option<f64>) -> Result<Matrix> {
    let (eig, lambda_max) = psd_eig(s)?;
    Ok(match mode {
        RootMode::Sqrt => eig.apply_spectral(f64::sqrt),
        RootMode::InvSqrt => {
            let tol = rank_tol.unwrap_or_else(|| default_rank_tol(s.rows(), s.cols())) * lambda_max;
            eig.apply_spectral(|l| if l > tol && l > 0.0 { 1.0 / l.sqrt() } else { 0.0 })
        }
    })
}

/// Moore-Penrose pseudoinverse through the SVD; singular values at or below
/// `rank_tol · σ_max` are treated as zero.
pub fn pinv(m: &Matrix, rank_tol: Option<f64>) -> Result<Matrix> {
    let s = svd(m)?;
    let sigma_max = s.sigma.first().copied().unwrap_or(0.0);
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(m.rows(), m.cols())) * sigma_max;
    let inv: Vec<f64> = s
        .sigma
        .iter()
        .map(|&x| if x > tol && x > 0.0 { 1.0 / x } else { 0.0 })
        .collect();
    Ok(s.v.scale_columns(&inv).matmul_t(&s.u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let a = gaussian_matrix(6, 6, 3).unwrap();
        let s = a.add(&a.transpose());
        let e = sym_eig(&s).unwrap();
        assert!(e.reconstruct().max_abs_diff(&s) < 1e-9);
        assert!(e.vectors.orthonormality_defect() < 1e-10);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn identity_roots() {
        let i = Matrix::identity(3);
        assert!(psd_sqrt(&i, RootMode::Sqrt, None).unwrap().max_abs_diff(&i) < 1e-15);
        assert!(psd_sqrt(&i, RootMode::InvSqrt, None).unwrap().max_abs_diff(&i) < 1e-15);
    }

    #[test]
    fn diagonal_inv_sqrt_zeroes_nullspace() {
        let s = Matrix::from_diag(&[4.0, 1.0, 0.0]);
        let r = psd_sqrt(&s, RootMode::InvSqrt, None).unwrap();
        assert!(r.max_abs_diff(&Matrix::from_diag(&[0.5, 1.0, 0.0])) < 1e-15);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = gaussian_matrix(7, 5, 21).unwrap();
        let s = a.t_matmul(&a);
        let r = psd_sqrt(&s, RootMode::Sqrt, None).unwrap();
        assert!(r.matmul(&r).max_abs_diff(&s) < 1e-8);
    }

    #[test]
    fn roots_compose_to_range_projector() {
        // rank-3 PSD in 5 dims
        let a = gaussian_matrix(3, 5, 4).unwrap();
        let s = a.t_matmul(&a);
        let roots = psd_roots(&s, None).unwrap();
        assert_eq!(roots.rank, 3);
        let p = roots.sqrt.matmul(&roots.inv_sqrt);
        assert!(p.max_abs_diff(&roots.range_projector) < 1e-8);
        assert!(p.matmul(&s).max_abs_diff(&s) < 1e-8);
    }

    #[test]
    fn rejects_negative_definite() {
        let s = Matrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(psd_sqrt(&s, RootMode::Sqrt, None), Err(Error::NotPsd { .. })));
        // tiny negative roundoff is clamped
        let s = Matrix::from_diag(&[1.0, -1e-12]);
        assert!(psd_sqrt(&s, RootMode::Sqrt, None).is_ok());
    }

    #[test]
    fn pinv_cases() {
        assert!(pinv(&Matrix::identity(3), None).unwrap().max_abs_diff(&Matrix::identity(3)) < 1e-15);
        let p = pinv(&Matrix::from_diag(&[2.0, 0.0]), None).unwrap();
        assert!(p.max_abs_diff(&Matrix::from_diag(&[0.5, 0.0])) < 1e-15);
        let m = gaussian_matrix(4, 3, 6).unwrap();
        let p = pinv(&m, None).unwrap();
        assert!(p.matmul(&m).max_abs_diff(&Matrix::identity(3)) < 1e-8);
    }

    #[test]
    fn pinv_moore_penrose_conditions_rank_deficient() {
        let m = gaussian_matrix(5, 2, 1).unwrap().matmul(&gaussian_matrix(2, 4, 2).unwrap());
        let p = pinv(&m, None).unwrap();
        assert!(m.matmul(&p).matmul(&m).max_abs_diff(&m) < 1e-8);
        assert!(p.matmul(&m).matmul(&p).max_abs_diff(&p) < 1e-8);
        let mp = m.matmul(&p);
        assert!(mp.max_abs_diff(&mp.transpose()) < 1e-8);
        let pm = p.matmul(&m);
        assert!(pm.max_abs_diff(&pm.transpose()) < 1e-8);
    }
}
