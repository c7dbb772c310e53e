//! The model-free theory suite behind `kvlab theory`. Instances are drawn
//! from the first configured seed.

use kvlab_core::linalg::random::{gaussian_matrix, random_psd, random_simplex, random_symmetric};
use kvlab_core::linalg::{eigh_symmetric, norm, random_orthonormal_with};
use kvlab_core::seed::{derive, rng};
use kvlab_core::theory::{asymmetry_check, asymmetry_empirical, rs_table, verify_theorem};
use kvlab_core::Matrix;
use rand::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct AsymmetryRow {
    pub bits: u8,
    pub predicted_ratio: u64,
    pub closed_form_ratio: f64,
    pub monte_carlo_ratio: f64,
    pub monte_carlo_relative_error: f64,
    pub sigma_small: f64,
    pub empirical_ratio_small: f64,
    pub empirical_deviation_small: f64,
    pub sigma_large: f64,
    pub empirical_ratio_large: f64,
    pub large_at_most_predicted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateRow {
    pub instance: usize,
    pub n: usize,
    pub r: usize,
    pub trials: usize,
    pub trial_violations: usize,
    pub axis_subsets: usize,
    pub axis_violations: usize,
    pub optimum: f64,
    pub best_trial: f64,
    pub step3_max_residual: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RsRow {
    /// Target `‖Δ‖₂/δ_min`.
    pub ratio: f64,
    pub instances: usize,
    pub error_order0: f64,
    pub error_order1: f64,
    pub error_order2: f64,
    pub error_order3: f64,
    pub error_pade: f64,
    /// Fraction of instances where order 2 beats order 1.
    pub order2_beats_order1: f64,
    /// Mean and max of `‖c₃‖/‖c₂‖`, the coefficient growth.
    pub coefficient_growth_mean: f64,
    pub coefficient_growth_max: f64,
    pub pade_fallbacks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub asymmetry: Vec<AsymmetryRow>,
    pub certificates: Vec<CertificateRow>,
    pub rs: Vec<RsRow>,
}

impl TheoryReport {
    pub fn headline(&self) -> String {
        let mut lines: Vec<String> = self
            .asymmetry
            .iter()
            .map(|a| {
                format!(
                    "b={:<2} predicted {:>7}  closed form {:>9}  monte carlo {:.1}",
                    a.bits, a.predicted_ratio, a.closed_form_ratio, a.monte_carlo_ratio
                )
            })
            .collect();
        let v: usize = self.certificates.iter().map(|c| c.trial_violations + c.axis_violations).sum();
        let n: usize = self.certificates.iter().map(|c| c.trials + c.axis_subsets).sum();
        lines.push(format!("certificates: {v} violations / {n} trials"));
        for r in &self.rs {
            lines.push(format!(
                "rs ratio {:<5} err o1 {:.3e} o2 {:.3e} o3 {:.3e} pade {:.3e} growth {:.3}",
                r.ratio, r.error_order1, r.error_order2, r.error_order3, r.error_pade, r.coefficient_growth_mean
            ));
        }
        lines.join("\n")
    }
}

fn unit<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let g = gaussian_matrix(n, 1, rng).into_vec();
    let s = norm(&g);
    g.into_iter().map(|x| x / s).collect()
}

/// `d×d` symmetric base with eigenvalues `d, d−1, …` (jittered) and a
/// perturbation scaled so `‖Δ‖₂ / δ_min` equals `ratio` for the top `r`.
pub fn rs_instance<R: Rng>(d: usize, r: usize, ratio: f64, rng: &mut R) -> Result<(Matrix, Matrix)> {
    let q = random_orthonormal_with(d, d, rng)?;
    let ev: Vec<f64> = (0..d).map(|i| (d - i) as f64 + 0.2 * rng.random::<f64>()).collect();
    let mut base = q.matmul(&Matrix::from_diag(&ev))?.matmul_t(&q)?;
    base.symmetrize();
    let mut dmin = f64::INFINITY;
    for k in 0..r {
        for m in 0..d {
            if m != k {
                dmin = dmin.min((ev[k] - ev[m]).abs());
            }
        }
    }
    let s = random_symmetric(d, rng);
    let sn = eigh_symmetric(&s)?.max_abs_eigenvalue();
    Ok((base, s.scale(ratio * dmin / sn)))
}

pub fn run(cfg: &ExperimentConfig) -> Result<TheoryReport> {
    let t = &cfg.theory;
    let seed = cfg.seeds[0];
    let alpha = random_simplex(t.keys, &mut rng(seed, "theory/alpha"));
    let u = unit(t.keys, &mut rng(seed, "theory/direction"));
    let mut asymmetry = Vec::new();
    for &b in &t.bits {
        let c = asymmetry_check(&alpha, &u, 1.0, b, t.monte_carlo_samples, derive(seed, &format!("theory/mc/{b}")))?;
        let small = asymmetry_empirical(&alpha, &u, t.sigma_small, b)?;
        let large = asymmetry_empirical(&alpha, &u, t.sigma_large, b)?;
        let mc = c.monte_carlo_ratio.unwrap_or(f64::NAN);
        let lr = large.ratio.unwrap_or(f64::NAN);
        asymmetry.push(AsymmetryRow {
            bits: b,
            predicted_ratio: c.predicted_ratio,
            closed_form_ratio: c.ratio.unwrap_or(f64::NAN),
            monte_carlo_ratio: mc,
            monte_carlo_relative_error: mc / c.predicted_ratio as f64 - 1.0,
            sigma_small: t.sigma_small,
            empirical_ratio_small: small.ratio.unwrap_or(f64::NAN),
            empirical_deviation_small: small.relative_deviation.unwrap_or(f64::NAN),
            sigma_large: t.sigma_large,
            empirical_ratio_large: lr,
            large_at_most_predicted: lr <= large.predicted_ratio as f64,
        });
    }

    let mut certificates = Vec::new();
    let span = t.certificate_max_dim - 1;
    for i in 0..t.certificate_instances {
        let n = 2 + i % span;
        let m = random_psd(n, &mut rng(seed, &format!("theory/certificate/{i}")));
        for r in 1..n {
            let c = verify_theorem(&m, r, t.certificate_trials, derive(seed, &format!("theory/certificate/{i}/{r}")))?;
            certificates.push(CertificateRow {
                instance: i,
                n,
                r,
                trials: c.trials,
                trial_violations: c.trial_violations,
                axis_subsets: c.axis_subsets,
                axis_violations: c.axis_violations,
                optimum: c.optimum,
                best_trial: c.best_trial,
                step3_max_residual: c.step3_max_residual,
                degenerate: c.degenerate,
            });
        }
    }

    let mut rs = Vec::new();
    for (j, &ratio) in t.rs_ratios.iter().enumerate() {
        let mut err = [0.0f64; 5];
        let (mut wins, mut growth, mut growth_max, mut fallbacks) = (0usize, 0.0, 0.0f64, 0usize);
        for i in 0..t.rs_instances {
            let mut g = rng(seed, &format!("theory/rs/{j}/{i}"));
            let (base, delta) = rs_instance(t.rs_dim, t.rs_rank, ratio, &mut g)?;
            let table = rs_table(&base, &delta, t.rs_rank)?;
            for (e, r) in err.iter_mut().zip(&table) {
                *e += r.subspace_error;
            }
            wins += usize::from(table[2].subspace_error < table[1].subspace_error);
            growth += table[0].coefficient_ratio;
            growth_max = growth_max.max(table[0].coefficient_ratio);
            fallbacks += table[4].pade_fallbacks;
        }
        let n = t.rs_instances.max(1) as f64;
        rs.push(RsRow {
            ratio,
            instances: t.rs_instances,
            error_order0: err[0] / n,
            error_order1: err[1] / n,
            error_order2: err[2] / n,
            error_order3: err[3] / n,
            error_pade: err[4] / n,
            order2_beats_order1: wins as f64 / n,
            coefficient_growth_mean: growth / n,
            coefficient_growth_max: growth_max,
            pade_fallbacks: fallbacks,
        });
    }
    Ok(TheoryReport { seed, asymmetry, certificates, rs })
}
