//! Dense real linear algebra shared by every other module.
//!
//! All accumulation is in `f64`; the eigensolver is cyclic Jacobi.

mod eigen;
mod matrix;
pub mod random;
mod softmax;

pub use eigen::{eigh_symmetric, normalize_sign, EigenDecomposition, SYMMETRY_TOL};
pub use matrix::{dot, gemm, gemm_into, norm, Matrix};
pub use random::{orthonormalize, random_orthonormal, random_orthonormal_with};
pub use softmax::{
    check_simplex, entropy, fisher_quadratic, kl_divergence, log_sum_exp, score_kl, softmax, softmax_in_place,
    softmax_jacobian, KL_EPS, SIMPLEX_TOL,
};

/// Subspace overlap `‖PᵀQ‖²_F / r` between two `d×r` orthonormal frames, in `[0, 1]`.
pub fn subspace_overlap(p: &Matrix, q: &Matrix) -> f64 {
    let r = p.cols().max(1) as f64;
    let c = p.t_matmul(q).expect("frames share the ambient dimension");
    (c.frobenius_norm().powi(2) / r).clamp(0.0, 1.0)
}

/// Orthogonal projector `P Pᵀ`.
pub fn projector(p: &Matrix) -> Matrix {
    p.matmul_t(p).expect("projector of a frame")
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_handles_ties_and_reversal() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 1.0, 2.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_of_identical_frames_is_one() {
        let q = random_orthonormal(6, 2, 1).unwrap();
        assert!((subspace_overlap(&q, &q) - 1.0).abs() < 1e-12);
    }
}
