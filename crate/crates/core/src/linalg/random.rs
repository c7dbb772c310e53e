//! Seeded random matrices: Gaussian, Haar-orthonormal frames, PSD and simplex samples.

use rand::Rng;
use rand_distr::StandardNormal;

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `(G + Gᵀ)/2` for Gaussian `G`.
pub fn random_symmetric<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let mut m = gaussian_matrix(n, n, rng);
    m.symmetrize();
    m
}

/// `GᵀG / n` for Gaussian `G` (full-rank PSD with probability one).
pub fn random_psd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let g = gaussian_matrix(n, n, rng);
    let mut m = g.gram().scale(1.0 / n as f64);
    m.symmetrize();
    m
}

/// Uniform sample from the probability simplex (normalized exponentials).
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `dim×cols` matrix with orthonormal columns, Haar-distributed on the Stiefel
/// manifold (Gram–Schmidt of a Gaussian matrix).
pub fn random_orthonormal(dim: usize, cols: usize, seed: u64) -> Result<Matrix> {
    let mut rng = crate::seed::rng(seed, "linalg/random_orthonormal");
    random_orthonormal_with(dim, cols, &mut rng)
}

pub fn random_orthonormal_with<R: Rng + ?Sized>(dim: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    if cols > dim {
        return Err(Error::arg(format!("cannot fit {cols} orthonormal columns in dimension {dim}")));
    }
    loop {
        let g = gaussian_matrix(dim, cols, rng);
        if let Some(q) = orthonormalize(&g) {
            return Ok(q);
        }
    }
}

/// Modified Gram–Schmidt with one re-orthogonalization pass. Returns `None`
/// when the columns are numerically dependent.
pub fn orthonormalize(m: &Matrix) -> Option<Matrix> {
    let (n, k) = m.shape();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut v = m.column(c);
        let original = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for q in &cols {
                let p = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= p * qi);
            }
        }
        let len = dot(&v, &v).sqrt();
        if len <= 1e-10 * original.max(f64::MIN_POSITIVE) || len == 0.0 {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= len);
        cols.push(v);
    }
    let mut out = Matrix::zeros(n, k);
    for (c, v) in cols.iter().enumerate() {
        out.set_column(c, v);
    }
    Some(out)
}
