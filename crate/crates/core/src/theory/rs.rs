use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{eigh_symmetric, orthonormalize, projector, subspace_overlap, Matrix};

/// Highest order computed; order 3 feeds the Padé [2/1] resummation.
const MAX_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsOrder {
    /// Partial sum through this order (0 = unperturbed eigenvectors).
    Order(usize),
    Pade21,
}

impl fmt::Display for RsOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RsOrder::Order(n) => write!(f, "order{n}"),
            RsOrder::Pade21 => write!(f, "pade21"),
        }
    }
}

/// Padé [2/1] value at λ = 1 of the series `a0 + a1 λ + a2 λ² + a3 λ³`.
///
/// Returns `(value, fell_back)`; falls back to the order-2 partial sum when
/// `a2 = 0` (flagged unless `a3` also vanishes, in which case the sum is
/// exact) or when the denominator `1 + q1` vanishes.
pub fn pade21(a: [f64; 4]) -> (f64, bool) {
    let [a0, a1, a2, a3] = a;
    let partial = a0 + a1 + a2;
    if a2 == 0.0 {
        return (partial, a3 != 0.0);
    }
    let q1 = -a3 / a2;
    let den = 1.0 + q1;
    if den.abs() <= 1e-12 * (1.0 + q1.abs()) {
        return (partial, true);
    }
    let p1 = a1 + q1 * a0;
    let p2 = a2 + q1 * a1;
    ((a0 + p1 + p2) / den, false)
}

/// Rayleigh–Schrödinger eigenvector corrections of the top-r eigenvectors
/// of `base` under perturbation `delta`, in `base`'s eigenbasis.
#[derive(Debug, Clone)]
pub struct RsSeries {
    pub r: usize,
    /// Eigenvectors of `base` (columns, descending eigenvalue).
    pub basis: Matrix,
    pub base_eigenvalues: Vec<f64>,
    /// `coeffs[n]` is the `d×r` matrix of `n`-th order corrections in
    /// eigenbasis coordinates (column k for state k); `coeffs[0]` is `[I_r; 0]`.
    pub coeffs: Vec<Matrix>,
    /// `energies[n][k]` is `E_k^{(n)}`.
    pub energies: Vec<Vec<f64>>,
    /// Smallest `|E_k − E_m|` over `k < r`, `m ≠ k`.
    pub delta_min: f64,
    /// Spectral norm of `delta`.
    pub delta_norm: f64,
    /// Exact top-r eigenvectors of `base + delta`.
    pub exact: Matrix,
    pub perturbed: Matrix,
}

/// Runs the recursion through order 3:
/// `ψ⁽ⁿ⁾ = R [Δ ψ⁽ⁿ⁻¹⁾ − Σ_{j=1}^{n−1} E⁽ʲ⁾ ψ⁽ⁿ⁻ʲ⁾]`, `E⁽ⁿ⁾ = ⟨k|Δ|ψ⁽ⁿ⁻¹⁾⟩`,
/// with reduced resolvent `R = Σ_{m≠k} |m⟩⟨m| / (E_k − E_m)` and
/// intermediate normalization `⟨k|ψ⁽ⁿ⁾⟩ = 0` for `n ≥ 1`.
pub fn rs_expand(base: &Matrix, delta: &Matrix, r: usize) -> Result<RsSeries> {
    if base.shape() != delta.shape() {
        return Err(Error::dim("base and perturbation shapes differ"));
    }
    let d = base.rows();
    if r == 0 || r > d {
        return Err(Error::arg(format!("rank {r} outside 1..={d}")));
    }
    let e = eigh_symmetric(base)?;
    let ev = &e.eigenvalues;
    let scale = e.max_abs_eigenvalue().max(f64::MIN_POSITIVE);
    let mut delta_min = f64::INFINITY;
    for k in 0..r {
        for m in 0..d {
            if m != k {
                delta_min = delta_min.min((ev[k] - ev[m]).abs());
            }
        }
    }
    if d > 1 && delta_min <= 1e-12 * scale {
        return Err(Error::Degenerate(format!("eigenvalue gap {delta_min:e} too small for non-degenerate expansion")));
    }
    let q = &e.eigenvectors;
    let dp = q.t_matmul(&delta.matmul(q)?)?;
    let mut coeffs = vec![Matrix::from_fn(d, r, |i, k| if i == k { 1.0 } else { 0.0 })];
    let mut energies: Vec<Vec<f64>> = vec![ev[..r].to_vec()];
    for n in 1..=MAX_ORDER {
        let mut c = Matrix::zeros(d, r);
        let mut en = vec![0.0; r];
        for k in 0..r {
            let prev = coeffs[n - 1].column(k);
            let dpsi = dp.matvec(&prev)?;
            en[k] = dpsi[k];
            let mut rhs = dpsi;
            for j in 1..n {
                let ej = energies[j][k];
                let psi = coeffs[n - j].column(k);
                rhs.iter_mut().zip(&psi).for_each(|(a, b)| *a -= ej * b);
            }
            let col: Vec<f64> = (0..d).map(|m| if m == k { 0.0 } else { rhs[m] / (ev[k] - ev[m]) }).collect();
            c.set_column(k, &col);
        }
        coeffs.push(c);
        energies.push(en);
    }
    let perturbed = base.add(delta)?;
    // the reference goes through the same orthonormalization as every
    // approximation, so equal frames compare exactly equal
    let exact = orthonormalize(&eigh_symmetric(&perturbed)?.top(r))
        .ok_or_else(|| Error::Numerical("exact eigenvectors are not independent".into()))?;
    let delta_norm = eigh_symmetric(delta)?.max_abs_eigenvalue();
    Ok(RsSeries {
        r,
        basis: q.clone(),
        base_eigenvalues: ev.clone(),
        coeffs,
        energies,
        delta_min,
        delta_norm,
        exact,
        perturbed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsResult {
    pub order: RsOrder,
    /// Approximate eigenvectors in the original coordinates (`d×r`, not
    /// re-orthonormalized).
    pub vectors: Matrix,
    /// Subspace overlap with the exact top-r eigenvectors, in `[0, 1]`.
    pub overlap: f64,
    /// `‖P̂P̂ᵀ − PPᵀ‖_F` for the orthonormalized approximation.
    pub subspace_error: f64,
    /// `Tr[P̂ᵀ(M + Δ)P̂]`
    pub objective: f64,
    /// `‖Δ‖₂ / δ_min`
    pub perturbation_ratio: f64,
    /// `‖c₃‖_F / ‖c₂‖_F` (infinite when `c₂ = 0 ≠ c₃`, 0 when both vanish).
    pub coefficient_ratio: f64,
    /// Components where Padé fell back to the order-2 sum.
    pub pade_fallbacks: usize,
}

impl RsSeries {
    pub fn coefficient_ratio(&self) -> f64 {
        let (c2, c3) = (self.coeffs[2].frobenius_norm(), self.coeffs[3].frobenius_norm());
        match (c2 == 0.0, c3 == 0.0) {
            (_, true) => 0.0,
            (true, false) => f64::INFINITY,
            _ => c3 / c2,
        }
    }

    /// Eigenbasis-coordinate approximation at `order` and the Padé fallback count.
    fn coordinates(&self, order: RsOrder) -> Result<(Matrix, usize)> {
        match order {
            RsOrder::Order(n) if n <= MAX_ORDER => {
                let mut s = self.coeffs[0].clone();
                for c in &self.coeffs[1..=n] {
                    s.add_assign(c)?;
                }
                Ok((s, 0))
            }
            RsOrder::Order(n) => Err(Error::arg(format!("order {n} above the computed maximum {MAX_ORDER}"))),
            RsOrder::Pade21 => {
                let (d, r) = self.coeffs[0].shape();
                let mut fallbacks = 0;
                let s = Matrix::from_fn(d, r, |i, k| {
                    let (v, fb) = pade21([0, 1, 2, 3].map(|n| self.coeffs[n][(i, k)]));
                    fallbacks += usize::from(fb);
                    v
                });
                Ok((s, fallbacks))
            }
        }
    }

    pub fn result(&self, order: RsOrder) -> Result<RsResult> {
        let (coords, pade_fallbacks) = self.coordinates(order)?;
        let vectors = self.basis.matmul(&coords)?;
        let frame = orthonormalize(&vectors).ok_or_else(|| Error::Numerical("approximate eigenvectors collapsed".into()))?;
        let objective = frame.t_matmul(&self.perturbed.matmul(&frame)?)?.trace();
        Ok(RsResult {
            order,
            overlap: subspace_overlap(&frame, &self.exact),
            subspace_error: projector(&frame).sub(&projector(&self.exact))?.frobenius_norm(),
            objective,
            vectors,
            perturbation_ratio: self.delta_norm / self.delta_min,
            coefficient_ratio: self.coefficient_ratio(),
            pade_fallbacks,
        })
    }
}

/// One Rayleigh–Schrödinger approximation of the top-r eigenvectors of
/// `base + delta` around `base`'s eigenbasis.
pub fn rs_series(base: &Matrix, delta: &Matrix, order: RsOrder, r: usize) -> Result<RsResult> {
    rs_expand(base, delta, r)?.result(order)
}

/// Orders 0–3 and Padé [2/1] for one instance.
pub fn rs_table(base: &Matrix, delta: &Matrix, r: usize) -> Result<Vec<RsResult>> {
    let s = rs_expand(base, delta, r)?;
    [RsOrder::Order(0), RsOrder::Order(1), RsOrder::Order(2), RsOrder::Order(3), RsOrder::Pade21]
        .into_iter()
        .map(|o| s.result(o))
        .collect()
}
