//! Dense kernels: thin QR, one-sided Jacobi SVD, Jacobi symmetric
//! eigensolver, PSD roots, pseudoinverse, counter-based Gaussian sampling.
//!
//! Everything here is a pure function of its inputs (and seed).

mod eig;
mod matrix;
mod qr;
mod rng;
mod svd;

pub use eig::{default_rank_tol, pinv, psd_roots, psd_sqrt, sym_eig, PsdRoots, RootMode, SymEigResult};
pub use matrix::Matrix;
pub use qr::{householder_qr, orth, thin_qr, ThinQrResult};
pub use rng::{counter_word, derive_seed, gaussian_matrix, label_tag, GaussianStream};
pub use svd::{svd, SvdResult, SVD_MAX_SWEEPS};

/// Haar-distributed random orthogonal `n × n` matrix (QR of a Gaussian).
pub fn random_orthogonal(n: usize, seed: u64) -> crate::Result<Matrix> {
    Ok(thin_qr(&gaussian_matrix(n, n, seed)?)?.q)
}

/// `‖P_a − P_b‖_max` for the projectors onto the column spans of two
/// matrices with orthonormal columns.
pub fn projector_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.matmul_t(a).max_abs_diff(&b.matmul_t(b))
}
