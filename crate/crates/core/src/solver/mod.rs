//! Low-rank correction solvers.
//!
//! Errors of modules that read the same input are stacked row-wise into
//! `E_cat` (m × d). A rank-`r` pair `(A, B)` with `A = [A_1; …; A_k]`
//! minimizes either `‖E_cat − AB‖_F` (unweighted) or
//! `‖(E_cat − AB) Σ^{1/2}‖_F` (covariance-aligned). The whitened problem is
//! solved either directly on `E_cat Σ^{1/2}` or, as in production, on the
//! d × d core `R_e Σ^{1/2}` obtained from a thin QR of `E_cat`, with a
//! randomized range finder on the core.

mod persist;
mod rsvd;

use serde::{Deserialize, Serialize};

use crate::calib::CovarianceEstimate;
use crate::error::{Error, Result};
use crate::linalg::{pinv, psd_roots, svd, Matrix, PsdRoots};

pub use persist::{load_factors, save_factors, FactorManifest};
pub use rsvd::{qr_reduced_rsvd, range_finder, solve_core_exact, whitened_core, CoreWorkspace};

/// One module's error block.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBlock {
    pub module_id: String,
    pub error: Matrix,
}

/// Ordered error blocks of one input-sharing group.
#[derive(Debug, Clone)]
pub struct StackedError {
    blocks: Vec<ErrorBlock>,
    input_dim: usize,
    total_rows: usize,
}

impl StackedError {
    pub fn stack(blocks: Vec<(String, Matrix)>) -> Result<Self> {
        let input_dim = blocks
            .first()
            .map(|(_, e)| e.cols())
            .ok_or_else(|| Error::invalid("a stack needs at least one block"))?;
        for (id, e) in &blocks {
            if e.cols() != input_dim {
                return Err(Error::shape(format!(
                    "block {id} has input dim {}, expected {input_dim}",
                    e.cols()
                )));
            }
        }
        for (i, (id, _)) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|(other, _)| other == id) {
                return Err(Error::invalid(format!("duplicate module id {id} in stack")));
            }
        }
        let total_rows = blocks.iter().map(|(_, e)| e.rows()).sum();
        let blocks = blocks
            .into_iter()
            .map(|(module_id, error)| ErrorBlock { module_id, error })
            .collect();
        Ok(Self { blocks, input_dim, total_rows })
    }

    pub fn single(module_id: impl Into<String>, error: Matrix) -> Self {
        Self::stack(vec![(module_id.into(), error)]).expect("one block always stacks")
    }

    pub fn blocks(&self) -> &[ErrorBlock] {
        &self.blocks
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `m = Σ O_i`
    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// `E_cat`, rows in block order.
    pub fn concat(&self) -> Matrix {
        let refs: Vec<&Matrix> = self.blocks.iter().map(|b| &b.error).collect();
        Matrix::vstack(&refs).expect("blocks share input dim")
    }

    /// Splits an m-row matrix into per-block row slices, in block order.
    pub fn split_rows(&self, stacked: &Matrix) -> Vec<(String, Matrix)> {
        assert_eq!(stacked.rows(), self.total_rows);
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                let end = start + b.error.rows();
                let part = stacked.row_block(start, end);
                start = end;
                (b.module_id.clone(), part)
            })
            .collect()
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        let max = self.total_rows.min(self.input_dim);
        if r == 0 || r > max {
            return Err(Error::invalid(format!("rank {r} outside 1..={max}")));
        }
        Ok(())
    }
}

/// Solver knobs: rank `r`, oversampling `p`, power iterations `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub rank: usize,
    pub oversampling: usize,
    pub power_iters: usize,
    pub whiten: bool,
    pub seed: u64,
    /// Relative cut for the pseudoinverse branch; `None` is `d · 2⁻⁵²`.
    pub rank_tol: Option<f64>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { rank: 64, oversampling: 16, power_iters: 2, whiten: true, seed: 0, rank_tol: None }
    }
}

impl SolveConfig {
    pub fn validate(&self, m: usize, d: usize) -> Result<()> {
        if self.rank == 0 || self.rank > m.min(d) {
            return Err(Error::invalid(format!("rank {} outside 1..={}", self.rank, m.min(d))));
        }
        if self.rank + self.oversampling > d {
            return Err(Error::invalid(format!(
                "rank + oversampling = {} exceeds input dim {d}",
                self.rank + self.oversampling
            )));
        }
        if let Some(t) = self.rank_tol {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("rank_tol {t} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Group-shared factors: one `A_i` per module and one `B` for the group.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedFactors {
    pub a_blocks: Vec<(String, Matrix)>,
    pub b_shared: Matrix,
    pub rank: usize,
    pub whitened: bool,
    /// `‖(E_cat − AB) Σ^{1/2}‖_F`, evaluated directly.
    pub residual_weighted: f64,
    /// `‖E_cat − AB‖_F`, evaluated directly.
    pub residual_unweighted: f64,
}

impl SharedFactors {
    pub fn a_stacked(&self) -> Matrix {
        let refs: Vec<&Matrix> = self.a_blocks.iter().map(|(_, a)| a).collect();
        Matrix::vstack(&refs).expect("A blocks share rank")
    }

    pub fn a_for(&self, module_id: &str) -> Option<&Matrix> {
        self.a_blocks.iter().find(|(id, _)| id == module_id).map(|(_, a)| a)
    }

    /// Recomputes both residuals against `se` under `cov`.
    pub fn evaluate(mut self, se: &StackedError, cov_sqrt: &Matrix) -> Result<Self> {
        self.residual_weighted = weighted_residual(se, cov_sqrt, &self)?;
        self.residual_unweighted = unweighted_residual(se, &self)?;
        Ok(self)
    }

    fn from_stacked(
        se: &StackedError,
        a: &Matrix,
        b: Matrix,
        whitened: bool,
        cov_sqrt: Option<&Matrix>,
    ) -> Result<Self> {
        let rank = b.rows();
        let mut f = SharedFactors {
            a_blocks: se.split_rows(a),
            b_shared: b,
            rank,
            whitened,
            residual_weighted: 0.0,
            residual_unweighted: 0.0,
        };
        f.residual_unweighted = unweighted_residual(se, &f)?;
        f.residual_weighted = match cov_sqrt {
            Some(s) => weighted_residual(se, s, &f)?,
            None => f.residual_unweighted,
        };
        Ok(f)
    }
}

/// `Σ^{1/2}`, pseudoinverse `Σ^{-1/2}` and the range projector of a covariance.
pub fn covariance_roots(cov: &CovarianceEstimate, d: usize, rank_tol: Option<f64>) -> Result<PsdRoots> {
    if cov.dim() != d {
        return Err(Error::shape(format!("covariance is {}-dim, errors have input dim {d}", cov.dim())));
    }
    psd_roots(&cov.sigma, rank_tol)
}

/// `Â = U_r diag(σ^{1/2})`, `B̂ = diag(σ^{1/2}) V_rᵀ`.
pub fn balanced_recovery(u_r: &Matrix, sigma_r: &[f64], v_r: &Matrix) -> Result<(Matrix, Matrix)> {
    if u_r.cols() != sigma_r.len() || v_r.cols() != sigma_r.len() {
        return Err(Error::shape(format!(
            "U_r has {} columns, V_r has {}, {} singular values",
            u_r.cols(),
            v_r.cols(),
            sigma_r.len()
        )));
    }
    if let Some(s) = sigma_r.iter().find(|&&s| !(s >= 0.0)) {
        return Err(Error::invalid(format!("negative singular value {s}")));
    }
    let roots: Vec<f64> = sigma_r.iter().map(|s| s.sqrt()).collect();
    Ok((u_r.scale_columns(&roots), v_r.scale_columns(&roots).transpose()))
}

/// Truncated, balanced factors of `target`, padded with zero directions up to `r`.
pub(crate) fn balanced_truncation(target: &Matrix, r: usize) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let s = svd(target)?;
    let (u, sigma, v) = pad_triplets(s.truncate(r), r);
    let (a, b) = balanced_recovery(&u, &sigma, &v)?;
    Ok((a, b, s.sigma))
}

/// Extends `(U_k, σ_k, V_k)` with zero columns to exactly `r` triplets.
pub(crate) fn pad_triplets((u, sigma, v): (Matrix, Vec<f64>, Matrix), r: usize) -> (Matrix, Vec<f64>, Matrix) {
    let k = sigma.len();
    if k >= r {
        return (u, sigma, v);
    }
    let zu = Matrix::zeros(u.rows(), r - k);
    let zv = Matrix::zeros(v.rows(), r - k);
    let mut s = sigma;
    s.resize(r, 0.0);
    (
        Matrix::hstack(&[&u, &zu]).expect("same rows"),
        s,
        Matrix::hstack(&[&v, &zv]).expect("same rows"),
    )
}

/// Stacked SVD: `B` spans the top-`r` right singular subspace of `E_cat`.
pub fn solve_unweighted(se: &StackedError, r: usize) -> Result<SharedFactors> {
    se.check_rank(r)?;
    let (a, b, _) = balanced_truncation(&se.concat(), r)?;
    SharedFactors::from_stacked(se, &a, b, false, None)
}

/// Exact covariance-aligned solve through the SVD of `E_cat Σ^{1/2}`,
/// lifted by `B* = B̂ Σ^{-1/2}` (pseudoinverse root when `Σ` is singular).
pub fn solve_whitened_exact(
    se: &StackedError,
    cov: &CovarianceEstimate,
    r: usize,
    rank_tol: Option<f64>,
) -> Result<SharedFactors> {
    se.check_rank(r)?;
    let roots = covariance_roots(cov, se.input_dim(), rank_tol)?;
    let whitened = se.concat().matmul(&roots.sqrt);
    let (a, b_hat, _) = balanced_truncation(&whitened, r)?;
    let b = b_hat.matmul(&roots.inv_sqrt);
    SharedFactors::from_stacked(se, &a, b, true, Some(&roots.sqrt))
}

/// Minimum-norm least-squares block fit `A_i = E_i Bᵀ (B Bᵀ)†`.
pub fn block_recovery(e_i: &Matrix, b_star: &Matrix, rank_tol: Option<f64>) -> Result<Matrix> {
    if e_i.cols() != b_star.cols() {
        return Err(Error::shape(format!(
            "block has {} columns, B has {}",
            e_i.cols(),
            b_star.cols()
        )));
    }
    let gram = b_star.matmul_t(b_star);
    Ok(e_i.matmul_t(b_star).matmul(&pinv(&gram, rank_tol)?))
}

/// Weighted least squares for the left factor at fixed `B`:
/// `A* = E Σ Bᵀ (B Σ Bᵀ)†`.
pub fn left_given_right_weighted(e: &Matrix, cov: &CovarianceEstimate, b: &Matrix) -> Result<Matrix> {
    if e.cols() != b.cols() || cov.dim() != e.cols() {
        return Err(Error::shape(format!(
            "E {:?}, B {:?}, covariance {}-dim",
            e.shape(),
            b.shape(),
            cov.dim()
        )));
    }
    let sb = cov.sigma.matmul_t(b); // Σ Bᵀ, d × r
    let gram = b.matmul(&sb);
    Ok(e.matmul(&sb).matmul(&pinv(&gram, None)?))
}

/// Independent per-module factors of the layerwise baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub module_id: String,
    pub a: Matrix,
    pub b: Matrix,
    pub residual_weighted: f64,
    pub residual_unweighted: f64,
}

/// Rank-`r` optimum for every module on its own (whitened when `cov` is
/// given).
pub fn layerwise_solve(
    se: &StackedError,
    cov: Option<&CovarianceEstimate>,
    r: usize,
    rank_tol: Option<f64>,
) -> Result<Vec<LayerFactors>> {
    se.blocks()
        .iter()
        .map(|block| {
            let single = StackedError::single(block.module_id.clone(), block.error.clone());
            let f = match cov {
                Some(c) => solve_whitened_exact(&single, c, r, rank_tol)?,
                None => solve_unweighted(&single, r)?,
            };
            let (_, a) = f.a_blocks.into_iter().next().expect("one block");
            Ok(LayerFactors {
                module_id: block.module_id.clone(),
                a,
                b: f.b_shared,
                residual_weighted: f.residual_weighted,
                residual_unweighted: f.residual_unweighted,
            })
        })
        .collect()
}

fn check_factor_shapes(se: &StackedError, factors: &SharedFactors) -> Result<()> {
    if factors.b_shared.cols() != se.input_dim() {
        return Err(Error::shape(format!(
            "B has {} columns, errors have input dim {}",
            factors.b_shared.cols(),
            se.input_dim()
        )));
    }
    if factors.a_blocks.len() != se.blocks().len() {
        return Err(Error::shape("factor blocks do not match error blocks"));
    }
    for ((id, a), block) in factors.a_blocks.iter().zip(se.blocks()) {
        if *id != block.module_id || a.rows() != block.error.rows() || a.cols() != factors.b_shared.rows() {
            return Err(Error::shape(format!("factor block {id} does not match module {}", block.module_id)));
        }
    }
    Ok(())
}

/// `‖(E_cat − AB) Σ^{1/2}‖_F`
pub fn weighted_residual(se: &StackedError, cov_sqrt: &Matrix, factors: &SharedFactors) -> Result<f64> {
    check_factor_shapes(se, factors)?;
    if cov_sqrt.shape() != (se.input_dim(), se.input_dim()) {
        return Err(Error::shape(format!("Σ^1/2 is {:?}, input dim {}", cov_sqrt.shape(), se.input_dim())));
    }
    let resid = se.concat().sub(&factors.a_stacked().matmul(&factors.b_shared));
    Ok(resid.matmul(cov_sqrt).frobenius_norm())
}

/// `‖E_cat − AB‖_F`
pub fn unweighted_residual(se: &StackedError, factors: &SharedFactors) -> Result<f64> {
    check_factor_shapes(se, factors)?;
    Ok(se.concat().sub(&factors.a_stacked().matmul(&factors.b_shared)).frobenius_norm())
}

/// `‖(E_i − A_i B_i) Σ^{1/2}‖_F` for one module.
pub fn module_weighted_residual(e: &Matrix, a: &Matrix, b: &Matrix, cov_sqrt: &Matrix) -> f64 {
    e.sub(&a.matmul(b)).matmul(cov_sqrt).frobenius_norm()
}
