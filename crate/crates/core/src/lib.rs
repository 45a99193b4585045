//! Group-shared, covariance-aligned low-rank correction of weight
//! quantization error.
//!
//! Modules that consume the same input tensor (q/k/v, gate/up) share one
//! right factor `B`; each keeps its own left factor `A_i`. The shared factor
//! is fitted to the stacked error under the input covariance, computed
//! through a QR-reduced randomized SVD, and at inference `X·Bᵀ` is formed
//! once per group and reused.
//!
//! - [`linalg`]: dense kernels and the seeded Gaussian generator
//! - [`io`]: the `GLXM` matrix container and JSON sidecars
//! - [`quant`]: group-wise symmetric integer quantization
//! - [`calib`]: covariance accumulation, shrinkage, synthetic spectra
//! - [`solver`]: stacked, whitened and QR-reduced randomized solvers
//! - [`runtime`]: grouped forward evaluation with cost accounting
//! - [`select`]: saliency scores, top-k restore plans, restoration sweeps
//! - [`analysis`]: energy curves, Monte-Carlo risk, RSVD trials, alignment

pub mod analysis;
pub mod calib;
pub mod error;
pub mod io;
pub mod linalg;
pub mod quant;
pub mod runtime;
pub mod select;
pub mod solver;

pub use error::{Error, Result};
pub use linalg::Matrix;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(test)]
pub(crate) mod oracle;
