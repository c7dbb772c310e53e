use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{eigh_symmetric, random_orthonormal_with, Matrix};

/// Largest dimension for which axis subsets are enumerated exhaustively.
pub const MAX_EXHAUSTIVE_DIM: usize = 10;

const SHARDS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremCertificate {
    pub n: usize,
    pub r: usize,
    /// `Tr[PᵀMP]` at the top-r eigenvectors.
    pub optimum: f64,
    pub trials: usize,
    pub trial_violations: usize,
    /// Best objective seen among the random trials.
    pub best_trial: f64,
    pub axis_subsets: usize,
    pub axis_violations: usize,
    pub best_axis_subset: f64,
    /// Largest `|Tr[(I−PPᵀ)M] − (Tr M − Tr PᵀMP)|` over the trial frames.
    pub step3_max_residual: f64,
    /// The r-th and (r+1)-th eigenvalues tie, so the optimal subspace is not unique.
    pub degenerate: bool,
}

impl TheoremCertificate {
    pub fn violations(&self) -> usize {
        self.trial_violations + self.axis_violations
    }
}

fn objective(m: &Matrix, p: &Matrix) -> f64 {
    p.t_matmul(&m.matmul(p).expect("square metric")).expect("frame").trace()
}

fn subsets(n: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, r, &mut Vec::new(), &mut out);
    out
}

/// Checks that the top-`r` eigenvectors of PSD `m` maximize `Tr[PᵀMP]`
/// against `trials` Haar-random frames and every axis-aligned `r`-subset,
/// and checks the trace identity behind the reconstruction error.
pub fn verify_theorem(m: &Matrix, r: usize, trials: usize, seed: u64) -> Result<TheoremCertificate> {
    let n = m.rows();
    if n > MAX_EXHAUSTIVE_DIM {
        return Err(Error::arg(format!("dimension {n} above the brute-force limit {MAX_EXHAUSTIVE_DIM}")));
    }
    if r == 0 || r > n {
        return Err(Error::arg(format!("rank {r} outside 1..={n}")));
    }
    let e = eigh_symmetric(m)?;
    let scale = e.max_abs_eigenvalue();
    if e.min_eigenvalue() < -1e-8 * scale {
        return Err(Error::NotPsd(format!("matrix has eigenvalue {:e}", e.min_eigenvalue())));
    }
    let optimum = objective(m, &e.top(r));
    let tol = 1e-9 * optimum.abs().max(1.0);
    let trace = m.trace();

    let per = trials / SHARDS;
    let shards: Vec<(usize, f64, f64)> = (0..SHARDS)
        .into_par_iter()
        .map(|s| {
            let count = per + usize::from(s < trials % SHARDS);
            let mut rng = crate::seed::rng(seed, &format!("theory/stiefel/{s}"));
            let (mut viol, mut best, mut resid) = (0, f64::NEG_INFINITY, 0.0f64);
            for _ in 0..count {
                let p = random_orthonormal_with(n, r, &mut rng).expect("r ≤ n");
                let obj = objective(m, &p);
                best = best.max(obj);
                viol += usize::from(obj > optimum + tol);
                let residual_proj = Matrix::identity(n).sub(&p.matmul_t(&p).unwrap()).unwrap();
                let lhs = residual_proj.matmul(m).unwrap().trace();
                resid = resid.max((lhs - (trace - obj)).abs());
            }
            (viol, best, resid)
        })
        .collect();
    let (trial_violations, best_trial, step3_max_residual) =
        shards.into_iter().fold((0, f64::NEG_INFINITY, 0.0f64), |a, b| (a.0 + b.0, a.1.max(b.1), a.2.max(b.2)));

    let mut axis_violations = 0;
    let mut best_axis_subset = f64::NEG_INFINITY;
    let all = subsets(n, r);
    for s in &all {
        let obj: f64 = s.iter().map(|&i| m[(i, i)]).sum();
        best_axis_subset = best_axis_subset.max(obj);
        axis_violations += usize::from(obj > optimum + tol);
    }
    let degenerate = r < n && (e.eigenvalues[r - 1] - e.eigenvalues[r]).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE);
    Ok(TheoremCertificate {
        n,
        r,
        optimum,
        trials,
        trial_violations,
        best_trial,
        axis_subsets: all.len(),
        axis_violations,
        best_axis_subset,
        step3_max_residual,
        degenerate,
    })
}
