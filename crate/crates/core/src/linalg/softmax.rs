//! Softmax, its Jacobian (the softmax Fisher metric) and KL divergences.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Floor applied inside logarithms when computing KL between probability vectors.
pub const KL_EPS: f64 = 1e-12;

/// Tolerance for accepting a vector as a point on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::arg("softmax of non-finite scores"));
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Max-subtracted softmax over a non-empty finite slice.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    x.iter_mut().for_each(|v| *v *= inv);
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn check_simplex(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::arg("empty probability vector"));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|&a| !a.is_finite() || a < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::arg(format!("vector is not on the simplex (sum {sum})")));
    }
    Ok(())
}

/// `J = diag(α) − ααᵀ`, the Jacobian of softmax at the scores producing `α`.
pub fn softmax_jacobian(alpha: &[f64]) -> Result<Matrix> {
    check_simplex(alpha)?;
    let n = alpha.len();
    Ok(Matrix::from_fn(n, n, |i, j| {
        let diag = if i == j { alpha[i] } else { 0.0 };
        diag - alpha[i] * alpha[j]
    }))
}

/// `uᵀ G u` for the softmax Fisher metric `G = diag(α) − ααᵀ`, i.e. the
/// variance of `u` under `α`.
pub fn fisher_quadratic(alpha: &[f64], u: &[f64]) -> f64 {
    let mean: f64 = alpha.iter().zip(u).map(|(a, x)| a * x).sum();
    alpha.iter().zip(u).map(|(a, x)| a * (x - mean) * (x - mean)).sum()
}

/// `KL(p ‖ q)` in nats with an [`KL_EPS`] floor inside the logarithms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(KL_EPS).ln() - qi.max(KL_EPS).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// `KL(softmax(s) ‖ softmax(s + δ))` evaluated in score space.
///
/// Uses `log Σ αᵢ e^{δᵢ} = log1p(Σ αᵢ expm1(δᵢ))` so that perturbations as small
/// as 1e-6 still yield KL values with full relative precision.
pub fn score_kl(scores: &[f64], delta: &[f64]) -> Result<f64> {
    if scores.len() != delta.len() {
        return Err(Error::dim("score_kl: scores and delta lengths differ"));
    }
    let alpha = softmax(scores)?;
    let shift = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    // log Σ α e^{δ} = shift + log Σ α e^{δ - shift}; only use expm1 when no shift is needed.
    let lse_diff = if shift < 1.0 {
        alpha.iter().zip(delta).map(|(a, d)| a * d.exp_m1()).sum::<f64>().ln_1p()
    } else {
        shift + alpha.iter().zip(delta).map(|(a, d)| a * (d - shift).exp()).sum::<f64>().ln()
    };
    let mean_delta: f64 = alpha.iter().zip(delta).map(|(a, d)| a * d).sum();
    Ok((lse_diff - mean_delta).max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_does_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300 || p[1] == 0.0);
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn softmax_matches_extended_precision_reference() {
        // e^{-2}, e^{-1}, 1 normalized, computed to 20 digits with mpmath.
        let want = [0.090_030_573_170_380_458, 0.244_728_471_054_797_652, 0.665_240_955_774_821_890];
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn jacobian_edge_cases() {
        let j = softmax_jacobian(&[1.0, 0.0]).unwrap();
        assert_eq!(j, Matrix::zeros(2, 2));
        let j = softmax_jacobian(&[0.5, 0.5]).unwrap();
        assert_eq!(j, Matrix::from_rows(&[vec![0.25, -0.25], vec![-0.25, 0.25]]).unwrap());
        assert!(softmax_jacobian(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = crate::seed::rng(3, "jac");
        for _ in 0..100 {
            let n = rng.random_range(2..7);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let alpha = softmax(&s).unwrap();
            let j = softmax_jacobian(&alpha).unwrap();
            let h = 1e-5;
            for c in 0..n {
                let mut up = s.clone();
                let mut dn = s.clone();
                up[c] += h;
                dn[c] -= h;
                let (pu, pd) = (softmax(&up).unwrap(), softmax(&dn).unwrap());
                for r in 0..n {
                    let fd = (pu[r] - pd[r]) / (2.0 * h);
                    assert!((fd - j[(r, c)]).abs() <= 1e-6);
                }
            }
            assert!(j.asymmetry() == 0.0);
            for r in 0..n {
                assert!(j.row(r).iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_kl_agrees_with_direct_kl_for_moderate_perturbations() {
        let s = [0.3, -1.2, 2.0, 0.0];
        let d = [0.1, -0.4, 0.25, 0.05];
        let shifted: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + b).collect();
        let direct = kl_divergence(&softmax(&s).unwrap(), &softmax(&shifted).unwrap());
        assert!((score_kl(&s, &d).unwrap() - direct).abs() < 1e-14);
        assert_eq!(score_kl(&s, &[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn kl_residual_is_third_order() {
        // KL(softmax(s)‖softmax(s+δ)) − ½δᵀGδ = O(‖δ‖³)
        let mut rng = crate::seed::rng(4, "kl3");
        for _ in 0..20 {
            let s: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dir: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let alpha = softmax(&s).unwrap();
            let residual = |scale: f64| {
                let d: Vec<f64> = dir.iter().map(|x| x * scale).collect();
                (score_kl(&s, &d).unwrap() - 0.5 * fisher_quadratic(&alpha, &d)).abs()
            };
            let norm = super::super::matrix::norm(&dir);
            let big = residual(1e-2 / norm);
            let small = residual(0.5e-2 / norm);
            assert!(big >= 6.0 * small, "ratio {}", big / small);
        }
    }
}
