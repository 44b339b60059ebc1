//! Reconstruction toolkit for highly accelerated multishot EPI.
//!
//! The pipeline runs SMS-MUSSELS (structured low-rank multishot recovery),
//! a pluggable shot-image denoiser, phase-cycling shot-phase estimation and
//! a joint virtual-coil SENSE solve for the final magnitude. The `simulate`
//! and `quantify` modules provide synthetic ground truth and parameter fits.

pub mod config;
pub mod container;
pub mod dataset;
pub mod denoiser;
pub mod encoding;
pub mod error;
pub mod hankel;
pub mod jvc;
pub mod mussels;
pub mod phase_cycling;
pub mod pipeline;
pub mod quantify;
pub mod simulate;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, ErrorClass, Result};
pub use tensor::C64;
