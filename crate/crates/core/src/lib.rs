//! Desk-scale laboratory comparing the two KV-cache compression paradigms:
//! rank reduction through a downstream-optimal projection and low-bit
//! per-channel quantization, at matched storage budgets.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense matrices, Jacobi eigensolver, softmax geometry, seeded randomness
//! - [`model`]: a small decoder-only transformer with an explicit, compressible KV cache
//! - [`compressor`]: quantizer, projector, hybrid composition and bit-budget accounting
//! - [`calibration`]: metric matrices (PCA, theorem, KQ-SVD, entropy) and projection bases
//! - [`instrument`]: attention KL, routing flips, spice ratios, cross-layer agreement
//! - [`theory`]: perturbation-asymmetry, subspace-optimality and Rayleigh–Schrödinger validators

pub mod calibration;
pub mod compressor;
pub mod error;
pub mod instrument;
pub mod linalg;
pub mod model;
pub mod seed;
pub mod tensor_io;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::Matrix;
