//! Rank-r projection applied by folding `PPᵀ` into the value (or key) weights.

use crate::error::{Error, Result};
use crate::linalg::{projector, Matrix};

use super::quant::orthonormality_error;

/// Validates that `p` is a `d×r` frame with `1 ≤ r ≤ d` and orthonormal columns.
pub fn check_frame(p: &Matrix, d: usize) -> Result<()> {
    if p.rows() != d {
        return Err(Error::dim(format!("basis has {} rows, head dimension is {d}", p.rows())));
    }
    if p.cols() == 0 {
        return Err(Error::arg("projection rank must be at least 1"));
    }
    if p.cols() > d {
        return Err(Error::arg(format!("projection rank {} exceeds head dimension {d}", p.cols())));
    }
    let err = orthonormality_error(p);
    if err > 1e-9 {
        return Err(Error::arg(format!("basis columns are not orthonormal (‖PᵀP − I‖ = {err:e})")));
    }
    Ok(())
}

/// Returns `W · P Pᵀ` for head weights `W` (model_dim × d, row-vector
/// convention `v = x W`), so that every value produced afterwards is
/// `V̂ = V P Pᵀ` with no runtime projection.
pub fn project_via_absorption(weights: &Matrix, p: &Matrix) -> Result<Matrix> {
    check_frame(p, weights.cols())?;
    weights.matmul(&projector(p))
}
