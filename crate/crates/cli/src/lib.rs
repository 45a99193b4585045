//! Batch pipeline around the `glowq` library: synthetic model generation,
//! quantization, calibration, solving, sweeps, runtime simulation, analysis
//! and invariant verification.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod synth;
pub mod verify;

pub use config::{Overrides, PipelineConfig};
pub use error::{CliError, Result};
