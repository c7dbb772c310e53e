use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{check_simplex, fisher_quadratic, norm, score_kl};

/// Monte Carlo shards; each draws from its own seed derived from the root.
const SHARDS: usize = 16;

/// Intervals for Simpson quadrature over the uniform noise bin.
const SIMPSON_INTERVALS: usize = 2048;

/// `3 · 2^{2b}`, exactly.
pub fn predicted_ratio(bits: u8) -> u64 {
    3u64 << (2 * u32::from(bits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetryResult {
    pub bits: u8,
    pub sigma_u: f64,
    /// `uᵀ G u` with `G = diag(α) − ααᵀ`.
    pub fisher_u: f64,
    /// `½ σ² uᵀGu`
    pub kl_proj: f64,
    /// `½ σ²/(3·2^{2b}) uᵀGu`
    pub kl_quant_expected: f64,
    /// Mean of `½ δ² uᵀGu` over uniform noise of bin width `2σ/2^b`.
    pub kl_quant_monte_carlo: f64,
    /// Standard error of the Monte Carlo mean.
    pub kl_quant_monte_carlo_se: f64,
    /// Sample mean of `δ²` and its standard error.
    pub noise_power: f64,
    pub noise_power_se: f64,
    /// Closed-form ratio; `None` when `uᵀGu = 0` or `σ = 0`.
    pub ratio: Option<f64>,
    /// `kl_proj / kl_quant_monte_carlo`; `None` when degenerate.
    pub monte_carlo_ratio: Option<f64>,
    pub predicted_ratio: u64,
    pub monte_carlo_samples: usize,
    pub degenerate: bool,
}

fn check_inputs(alpha: &[f64], u: &[f64], sigma_u: f64, bits: u8) -> Result<f64> {
    check_simplex(alpha)?;
    if u.len() != alpha.len() {
        return Err(Error::dim("direction and attention row lengths differ"));
    }
    if (norm(u) - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("direction is not unit norm (‖u‖ = {})", norm(u))));
    }
    if !(2..=16).contains(&bits) {
        return Err(Error::arg(format!("bit width {bits} outside 2..=16")));
    }
    if !(sigma_u.is_finite() && sigma_u >= 0.0) {
        return Err(Error::arg("sigma_u must be finite and non-negative"));
    }
    Ok(fisher_quadratic(alpha, u))
}

fn bin_width(sigma_u: f64, bits: u8) -> f64 {
    2.0 * sigma_u / f64::from(1u32 << bits)
}

/// Sums `(Σδ², Σδ⁴)` of `samples` uniform draws on `[−w/2, w/2]`, sharded
/// deterministically.
fn noise_moments(width: f64, samples: usize, seed: u64) -> (f64, f64) {
    let per = samples / SHARDS;
    let shards: Vec<(f64, f64)> = (0..SHARDS)
        .into_par_iter()
        .map(|s| {
            let n = per + usize::from(s < samples % SHARDS);
            let mut rng = crate::seed::rng(seed, &format!("theory/asymmetry/{s}"));
            let (mut m2, mut m4) = (0.0, 0.0);
            for _ in 0..n {
                let d = width * (rng.random::<f64>() - 0.5);
                let d2 = d * d;
                m2 += d2;
                m4 += d2 * d2;
            }
            (m2, m4)
        })
        .collect();
    shards.into_iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Projection-vs-quantization KL under the second-order (Fisher) model,
/// in closed form and by Monte Carlo over uniform quantization noise.
pub fn asymmetry_check(alpha: &[f64], u: &[f64], sigma_u: f64, bits: u8, samples: usize, seed: u64) -> Result<AsymmetryResult> {
    let q = check_inputs(alpha, u, sigma_u, bits)?;
    if samples < 10_000 {
        return Err(Error::arg("asymmetry Monte Carlo needs at least 10⁴ samples"));
    }
    let pred = predicted_ratio(bits);
    let kl_proj = 0.5 * sigma_u * sigma_u * q;
    // uniform noise on the half-bin h has E[δ²] = h²/3
    let h = 0.5 * bin_width(sigma_u, bits);
    let noise_expected = h * h / 3.0;
    let kl_quant_expected = 0.5 * noise_expected * q;
    let (m2, m4) = noise_moments(bin_width(sigma_u, bits), samples, seed);
    let n = samples as f64;
    let noise_power = m2 / n;
    let noise_power_se = ((m4 / n - noise_power * noise_power).max(0.0) / n).sqrt();
    let kl_mc = 0.5 * noise_power * q;
    let degenerate = q <= 0.0 || sigma_u == 0.0;
    Ok(AsymmetryResult {
        bits,
        sigma_u,
        fisher_u: q,
        kl_proj,
        kl_quant_expected,
        kl_quant_monte_carlo: kl_mc,
        kl_quant_monte_carlo_se: 0.5 * noise_power_se * q,
        noise_power,
        noise_power_se,
        // ½·uᵀGu cancels, leaving σ²/E[δ²] = 3σ²/h²; h = σ/2^b makes this exact
        ratio: (!degenerate).then(|| 3.0 * ((sigma_u * sigma_u) / (h * h))),
        monte_carlo_ratio: (!degenerate && kl_mc > 0.0).then(|| kl_proj / kl_mc),
        predicted_ratio: pred,
        monte_carlo_samples: samples,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalAsymmetry {
    pub bits: u8,
    pub sigma_u: f64,
    /// Exact `KL(softmax(s) ‖ softmax(s + σu))`.
    pub kl_proj: f64,
    /// Exact softmax KL averaged over uniform noise `δu`, `δ` on the bin.
    pub kl_quant: f64,
    pub ratio: Option<f64>,
    /// Second-order prediction `3·2^{2b}`.
    pub predicted_ratio: u64,
    /// `ratio / predicted − 1`
    pub relative_deviation: Option<f64>,
    pub degenerate: bool,
}

/// Exact-softmax counterpart of [`asymmetry_check`]: scores `log α` are
/// shifted by `σu` for projection, and by `δu` with `δ` uniform on the
/// quantization bin for quantization, whose expectation is taken by
/// composite Simpson quadrature.
pub fn asymmetry_empirical(alpha: &[f64], u: &[f64], sigma_u: f64, bits: u8) -> Result<EmpiricalAsymmetry> {
    let q = check_inputs(alpha, u, sigma_u, bits)?;
    if alpha.iter().any(|&a| a <= 0.0) {
        return Err(Error::arg("empirical asymmetry needs a strictly positive attention row"));
    }
    let scores: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    let kl_at = |t: f64| -> Result<f64> {
        let delta: Vec<f64> = u.iter().map(|x| t * x).collect();
        score_kl(&scores, &delta)
    };
    let kl_proj = kl_at(sigma_u)?;
    let half = 0.5 * bin_width(sigma_u, bits);
    let n = SIMPSON_INTERVALS;
    let h = 2.0 * half / n as f64;
    let mut acc = kl_at(-half)? + kl_at(half)?;
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * kl_at(-half + i as f64 * h)?;
    }
    let kl_quant = if half > 0.0 { acc * h / 3.0 / (2.0 * half) } else { 0.0 };
    let pred = predicted_ratio(bits);
    let degenerate = q <= 0.0 || kl_quant <= 0.0;
    let ratio = (!degenerate).then(|| kl_proj / kl_quant);
    Ok(EmpiricalAsymmetry {
        bits,
        sigma_u,
        kl_proj,
        kl_quant,
        ratio,
        predicted_ratio: pred,
        relative_deviation: ratio.map(|r| r / pred as f64 - 1.0),
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryOutcome {
    pub clean_gap: f64,
    pub projection_flips: bool,
    /// Worst case over the whole quantization bin (both edges and a grid inside).
    pub quantization_flips: bool,
}

/// Two-key decision whose winner leads by `gap_dim − rival` in one score
/// direction while the rival holds `rival` in another. Projection deletes
/// the gap-carrying direction; quantization at `bits` with the same `σ_u`
/// (the removed magnitude) only adds bounded noise along it.
pub fn boundary_case(gap_dim: f64, rival: f64, bits: u8) -> Result<BoundaryOutcome> {
    if !(gap_dim > rival && rival > 0.0) {
        return Err(Error::arg("need gap_dim > rival > 0 for a decision the rival can take over"));
    }
    let clean = [gap_dim, rival];
    let projected = [0.0, rival];
    let half = 0.5 * bin_width(gap_dim, bits);
    let flips = |d: f64| crate::instrument::top1_flips(&clean, &[gap_dim + d, rival]);
    let quantization_flips = (0..=64).map(|i| -half + 2.0 * half * i as f64 / 64.0).any(flips);
    Ok(BoundaryOutcome {
        clean_gap: gap_dim - rival,
        projection_flips: crate::instrument::top1_flips(&clean, &projected),
        quantization_flips,
    })
}
