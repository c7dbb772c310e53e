//! Theoretical checks that need no trained model: the projection vs
//! quantization KL asymmetry, a brute-force certificate for the top-r
//! eigenvector optimum, and Rayleigh–Schrödinger eigenvector corrections.

mod asymmetry;
mod certificate;
mod rs;

pub use asymmetry::{
    asymmetry_check, asymmetry_empirical, boundary_case, predicted_ratio, AsymmetryResult, BoundaryOutcome,
    EmpiricalAsymmetry,
};
pub use certificate::{verify_theorem, TheoremCertificate, MAX_EXHAUSTIVE_DIM};
pub use rs::{pade21, rs_expand, rs_series, rs_table, RsOrder, RsResult, RsSeries};
