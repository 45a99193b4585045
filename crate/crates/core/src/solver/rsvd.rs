use super::{balanced_recovery, covariance_roots, pad_triplets, SharedFactors, SolveConfig, StackedError};
use crate::calib::CovarianceEstimate;
use crate::error::Result;
use crate::linalg::{gaussian_matrix, householder_qr, orth, svd, Matrix, PsdRoots};

/// Intermediates of the QR-reduced solve.
#[derive(Debug, Clone)]
pub struct CoreWorkspace {
    /// Orthonormal factor of `E_cat` (m × k, k = min(m, d)).
    pub q_e: Matrix,
    /// Triangular factor of `E_cat` (k × d).
    pub r_e: Matrix,
    /// `M = R_e Σ^{1/2}`.
    pub core: Matrix,
    /// Gaussian test matrix `Ω`, d × (r + p).
    pub sketch: Matrix,
    /// Orthonormal range basis `Q` of the sketch after power iterations.
    pub range: Matrix,
    /// `Qᵀ M`.
    pub compressed: Matrix,
}

/// Orthonormal basis for the range of `m · Ω` after `power_iters` rounds of
/// `Y ← M (Mᵀ Y)`, re-orthonormalizing between every product.
///
/// Returns `(Ω, Q)`. When the sketch is at least as wide as `m` has rows the
/// range is all of `R^rows` and `Q = I`.
pub fn range_finder(m: &Matrix, width: usize, power_iters: usize, seed: u64) -> Result<(Matrix, Matrix)> {
    let omega = gaussian_matrix(m.cols(), width, seed)?;
    if width >= m.rows() {
        return Ok((omega, Matrix::identity(m.rows())));
    }
    let mut y = m.matmul(&omega);
    for _ in 0..power_iters {
        let q = orth(&y)?;
        let z = orth(&m.t_matmul(&q))?;
        y = m.matmul(&z);
    }
    Ok((omega, orth(&y)?))
}

fn reduce(se: &StackedError, cov: &CovarianceEstimate, cfg: &SolveConfig) -> Result<(Matrix, Matrix, PsdRoots)> {
    let d = se.input_dim();
    let roots = if cfg.whiten {
        covariance_roots(cov, d, cfg.rank_tol)?
    } else {
        let i = Matrix::identity(d);
        PsdRoots { sqrt: i.clone(), inv_sqrt: i.clone(), range_projector: i, eigenvalues: vec![1.0; d], rank: d }
    };
    let qr = householder_qr(&se.concat());
    Ok((qr.q, qr.r, roots))
}

fn lift(
    se: &StackedError,
    q_e: &Matrix,
    u: Matrix,
    sigma: Vec<f64>,
    v: Matrix,
    roots: &PsdRoots,
    whiten: bool,
) -> Result<SharedFactors> {
    let (a_hat, b_hat) = balanced_recovery(&u, &sigma, &v)?;
    let a = q_e.matmul(&a_hat);
    let b = b_hat.matmul(&roots.inv_sqrt);
    SharedFactors::from_stacked(se, &a, b, whiten, Some(&roots.sqrt))
}

fn zero_factors(se: &StackedError, r: usize, whiten: bool) -> SharedFactors {
    let a_blocks = se
        .blocks()
        .iter()
        .map(|b| (b.module_id.clone(), Matrix::zeros(b.error.rows(), r)))
        .collect();
    SharedFactors {
        a_blocks,
        b_shared: Matrix::zeros(r, se.input_dim()),
        rank: r,
        whitened: whiten,
        residual_weighted: 0.0,
        residual_unweighted: 0.0,
    }
}

/// Covariance-aligned QR reduction followed by a randomized SVD of the core.
///
/// 1. `Q_e R_e = E_cat`
/// 2. `M = R_e Σ^{1/2}`
/// 3. `Y = M Ω`, `Ω` Gaussian d × (r + p), then `q` power steps
/// 4. `Q = orth(Y)`
/// 5. `B_small = Qᵀ M = Ũ Σ Vᵀ`
/// 6. `U = Q Ũ`
/// 7. keep the top `r`; `Â = U_r Σ_r^{1/2}`, `B̂ = Σ_r^{1/2} V_rᵀ`
/// 8. `A* = Q_e Â`, `B* = B̂ Σ^{-1/2}` (pseudoinverse root when singular)
///
/// With `cfg.whiten == false` the same pipeline runs with `Σ = I`.
pub fn qr_reduced_rsvd(
    se: &StackedError,
    cov: &CovarianceEstimate,
    cfg: &SolveConfig,
) -> Result<(SharedFactors, CoreWorkspace)> {
    cfg.validate(se.total_rows(), se.input_dim())?;
    let r = cfg.rank;
    let (q_e, r_e, roots) = reduce(se, cov, cfg)?;
    let core = r_e.matmul(&roots.sqrt);

    let width = r + cfg.oversampling;
    if core.max_abs() == 0.0 {
        let sketch = gaussian_matrix(se.input_dim(), width, cfg.seed)?;
        let ws = CoreWorkspace {
            q_e,
            r_e,
            compressed: core.clone(),
            range: Matrix::identity(core.rows()),
            core,
            sketch,
        };
        return Ok((zero_factors(se, r, cfg.whiten), ws));
    }

    let (sketch, range) = range_finder(&core, width, cfg.power_iters, cfg.seed)?;
    let compressed = range.t_matmul(&core);
    let small = svd(&compressed)?;
    let (u_tilde, sigma, v) = pad_triplets(small.truncate(r), r);
    // lift the left vectors into core row space; padded columns stay zero
    let u = range.matmul(&u_tilde);
    let factors = lift(se, &q_e, u, sigma, v, &roots, cfg.whiten)?;
    Ok((factors, CoreWorkspace { q_e, r_e, core, sketch, range, compressed }))
}

/// The core `M = R_e Σ^{1/2}` (`Σ = I` when `cov` is `None`). It has the
/// same nonzero singular values as `E_cat Σ^{1/2}`.
pub fn whitened_core(se: &StackedError, cov: Option<&CovarianceEstimate>, rank_tol: Option<f64>) -> Result<Matrix> {
    let r_e = householder_qr(&se.concat()).r;
    match cov {
        Some(c) => Ok(r_e.matmul(&covariance_roots(c, se.input_dim(), rank_tol)?.sqrt)),
        None => Ok(r_e),
    }
}

/// QR reduction with an exact SVD of the core; the deterministic reference
/// for [`qr_reduced_rsvd`]. Returns the factors and the core `M`.
pub fn solve_core_exact(
    se: &StackedError,
    cov: &CovarianceEstimate,
    r: usize,
    rank_tol: Option<f64>,
) -> Result<(SharedFactors, Matrix)> {
    se.check_rank(r)?;
    let cfg = SolveConfig { rank: r, oversampling: 0, power_iters: 0, whiten: true, seed: 0, rank_tol };
    let (q_e, r_e, roots) = reduce(se, cov, &cfg)?;
    let core = r_e.matmul(&roots.sqrt);
    let s = svd(&core)?;
    let (u, sigma, v) = pad_triplets(s.truncate(r), r);
    let factors = lift(se, &q_e, u, sigma, v, &roots, true)?;
    Ok((factors, core))
}
