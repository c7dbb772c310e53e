use std::cmp::Ordering;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Tolerance for accepting a matrix as symmetric, relative to `max(1, ‖m‖_max)`.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalues closer than this (relative to the spectral radius) are treated as tied.
const TIE_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 64;

/// Spectral decomposition `m = Q Λ Qᵀ` of a real symmetric matrix.
///
/// Eigenvalues are sorted descending and column `i` of `eigenvectors` pairs
/// with `eigenvalues[i]`. Each eigenvector is sign-normalized so its first
/// non-negligible entry is positive; ties between equal eigenvalues are broken
/// by descending lexicographic order of the normalized vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Leading `r` eigenvectors as a `d×r` matrix.
    pub fn top(&self, r: usize) -> Matrix {
        self.eigenvectors.columns(0, r)
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i)
    }

    /// `Q f(Λ) Qᵀ`
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let q = &self.eigenvectors;
        let scaled = Matrix::from_fn(q.rows(), q.cols(), |r, c| q[(r, c)] * f(self.eigenvalues[c]));
        let mut out = scaled.matmul_t(q).expect("square factors");
        out.symmetrize();
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.map_spectrum(|l| l)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn max_abs_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()))
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eigh_symmetric(m: &Matrix) -> Result<EigenDecomposition> {
    if !m.is_square() {
        return Err(Error::dim(format!("eigh: {}x{} is not square", m.rows(), m.cols())));
    }
    if !m.is_finite() {
        return Err(Error::Numerical("eigh: non-finite input".into()));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);

    let scale = a.frobenius_norm();
    if scale > 0.0 {
        let threshold = f64::EPSILON * 1e-2 * scale;
        for _ in 0..MAX_SWEEPS {
            let off: f64 = (0..n)
                .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
                .map(|(p, q)| a[(p, q)] * a[(p, q)])
                .sum::<f64>()
                .sqrt();
            if off <= threshold {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    rotate(&mut a, &mut v, p, q);
                }
            }
        }
    }

    let values: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut pairs: Vec<(f64, Vec<f64>)> = values
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let mut col = v.column(i);
            normalize_sign(&mut col);
            (l, col)
        })
        .collect();

    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal));
    let radius = pairs.iter().fold(0.0f64, |acc, p| acc.max(p.0.abs()));
    let tie = TIE_TOL * radius.max(f64::MIN_POSITIVE);
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[end - 1].0 - pairs[end].0).abs() <= tie {
            end += 1;
        }
        pairs[start..end].sort_by(|x, y| lexicographic(&y.1, &x.1));
        start = end;
    }

    let mut eigenvectors = Matrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (c, (l, col)) in pairs.into_iter().enumerate() {
        eigenvalues.push(l);
        eigenvectors.set_column(c, &col);
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Flips `v` so that its first entry with magnitude above 1e-12 is positive.
pub fn normalize_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random::{gaussian_matrix, random_symmetric};

    fn check_invariants(m: &Matrix, e: &EigenDecomposition) {
        let q = &e.eigenvectors;
        let qtq = q.t_matmul(q).unwrap();
        assert!(qtq.max_abs_diff(&Matrix::identity(m.rows())) <= 1e-9);
        let recon = e.reconstruct();
        assert!(recon.max_abs_diff(m) <= 1e-7 * m.max_abs().max(f64::MIN_POSITIVE));
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = eigh_symmetric(&Matrix::identity(4)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0; 4]);
        assert_eq!(e.eigenvectors, Matrix::identity(4));
    }

    #[test]
    fn diagonal_gives_permuted_axes() {
        let e = eigh_symmetric(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 2.0, 1.0]);
        let want = Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(e.eigenvectors, want);
    }

    #[test]
    fn two_by_two_matches_closed_form() {
        // λ = (a+c)/2 ± sqrt(((a-c)/2)² + b²)
        for &(a, b, c) in &[(2.0, 1.0, 3.0), (-1.0, 0.5, 4.0), (1e-3, 7.0, -2.0)] {
            let m = Matrix::from_rows(&[vec![a, b], vec![b, c]]).unwrap();
            let e = eigh_symmetric(&m).unwrap();
            let mid = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            assert!((e.eigenvalues[0] - (mid + rad)).abs() < 1e-12);
            assert!((e.eigenvalues[1] - (mid - rad)).abs() < 1e-12);
            check_invariants(&m, &e);
        }
    }

    #[test]
    fn three_by_three_matches_trigonometric_closed_form() {
        let mut rng = crate::seed::rng(11, "eig3");
        for _ in 0..20 {
            let m = random_symmetric(3, &mut rng);
            // Smith's trigonometric solution of the characteristic cubic.
            let q = m.trace() / 3.0;
            let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
            let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2) + 2.0 * p1;
            let p = (p2 / 6.0).sqrt();
            let b = Matrix::from_fn(3, 3, |i, j| (m[(i, j)] - if i == j { q } else { 0.0 }) / p);
            let det_b = b[(0, 0)] * (b[(1, 1)] * b[(2, 2)] - b[(1, 2)] * b[(2, 1)])
                - b[(0, 1)] * (b[(1, 0)] * b[(2, 2)] - b[(1, 2)] * b[(2, 0)])
                + b[(0, 2)] * (b[(1, 0)] * b[(2, 1)] - b[(1, 1)] * b[(2, 0)]);
            let phi = (det_b / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
            let l1 = q + 2.0 * p * phi.cos();
            let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
            let l2 = 3.0 * q - l1 - l3;
            let e = eigh_symmetric(&m).unwrap();
            for (got, want) in e.eigenvalues.iter().zip([l1, l2, l3]) {
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let mut rng = crate::seed::rng(5, "eig8");
        let m = random_symmetric(8, &mut rng);
        let e = eigh_symmetric(&m).unwrap();
        check_invariants(&m, &e);
    }

    #[test]
    fn deterministic_on_identical_input() {
        let mut rng = crate::seed::rng(9, "det");
        let g = gaussian_matrix(12, 12, &mut rng);
        let m = g.gram();
        assert_eq!(eigh_symmetric(&m).unwrap(), eigh_symmetric(&m).unwrap());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(eigh_symmetric(&Matrix::zeros(2, 3)), Err(Error::Dimension(_))));
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eigh_symmetric(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn zero_matrix() {
        let e = eigh_symmetric(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 3]);
        check_invariants(&Matrix::zeros(3, 3), &e);
    }
}
