//! Structure-conditioned RNA sequence design.
//!
//! The pipeline featurizes a target backbone, samples sequences with a
//! conditional denoising-diffusion model, folds them with a pluggable
//! oracle, scores the folds against the target and fine-tunes the
//! noise-prediction policy with a clipped, baselined policy gradient.

pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod featurize;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod rewards;
pub mod rl;
pub mod struct_io;

#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use error::{Error, OracleError, Result};
