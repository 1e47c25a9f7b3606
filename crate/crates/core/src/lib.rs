//! Post-training multi-binary quantization for masked denoising language
//! models.
//!
//! The pipeline simulates masked calibration inputs ([`mcs`]), accumulates
//! activation statistics ([`stats`]), allocates per-group orders under an
//! exact two-bit mean ([`abmp`]), fits row/column-scaled binary expansions
//! ([`daq`]) and stores them in a packed format ([`qformat`]). [`toy`] is a
//! small masked denoiser used as the calibration and evaluation target and
//! [`pipeline`] wires the stages together for the command line tool.

pub mod abmp;
pub mod daq;
pub mod error;
pub mod mcs;
pub mod pipeline;
pub mod qformat;
pub mod stats;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::{DenseMatrix, Rng};
