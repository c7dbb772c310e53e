use crate::calibration::metric_theorem;
use crate::error::{Error, Result};
use crate::linalg::{eigh_symmetric, kl_divergence, softmax, spearman, Matrix};
use crate::model::{ForwardOptions, HeadActivations, Model, ValueShift};

/// Masses at or below this fraction of a head's largest are treated as zero.
const MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpiceEntry {
    pub layer: usize,
    pub kv_head: usize,
    pub direction: usize,
    /// Metric eigenvalue of the direction.
    pub mass: f64,
    /// Calibration standard deviation of values along the direction.
    pub sd: f64,
    /// Output KL (nats) under a ±`epsilon_sd`·sd shift, averaged over sign.
    pub toxicity: f64,
    /// `toxicity / mass`; `None` where the mass is numerically zero.
    pub spice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpiceTable {
    pub epsilon_sd: f64,
    pub entries: Vec<SpiceEntry>,
    /// Spearman correlation between mass and toxicity over all entries.
    pub spearman: f64,
}

/// Spice entries of one head from a metric, the calibration rows the
/// standard deviations come from, and a toxicity oracle evaluated at a
/// value-space shift vector.
pub fn spice_table_with(
    layer: usize,
    kv_head: usize,
    metric: &Matrix,
    values: &Matrix,
    epsilon_sd: f64,
    mut toxicity: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<SpiceEntry>> {
    if metric.rows() != values.cols() {
        return Err(Error::dim("metric and value widths differ"));
    }
    let e = eigh_symmetric(metric)?;
    let top = e.eigenvalues.first().copied().unwrap_or(0.0).abs();
    let n = values.rows().max(1) as f64;
    (0..e.dim())
        .map(|i| {
            let u = e.vector(i);
            let proj = values.matvec(&u)?;
            let mean = proj.iter().sum::<f64>() / n;
            let sd = (proj.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
            let toxicity = if epsilon_sd == 0.0 {
                0.0
            } else {
                let plus: Vec<f64> = u.iter().map(|x| epsilon_sd * sd * x).collect();
                let minus: Vec<f64> = plus.iter().map(|x| -x).collect();
                0.5 * (toxicity(&plus)? + toxicity(&minus)?)
            };
            let mass = e.eigenvalues[i];
            let spice = (mass > MASS_FLOOR * top).then(|| toxicity / mass);
            Ok(SpiceEntry { layer, kv_head, direction: i, mass, sd, toxicity, spice })
        })
        .collect()
}

/// Mean next-token `KL(p_clean ‖ p_shifted)` over all positions of `streams`
/// when every cached value row of one head is shifted by `shift.delta`.
pub fn output_kl(model: &Model, streams: &[Vec<u32>], clean: &[Matrix], shift: &ValueShift) -> Result<f64> {
    let opts = ForwardOptions { capture: false, value_shift: Some(shift.clone()) };
    let mut total = 0.0;
    let mut count = 0;
    for (s, lc) in streams.iter().zip(clean) {
        let (ls, _) = model.forward_traced(s, &mut model.new_cache(), &opts)?;
        for t in 0..s.len() {
            total += kl_divergence(&softmax(lc.row(t))?, &softmax(ls.row(t))?);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Spice table over every (layer, kv_head) using the eigenbasis of the
/// theorem metric from `acts` and output-distribution KL on `streams`.
pub fn spice_table(
    model: &Model,
    acts: &[Vec<HeadActivations>],
    streams: &[Vec<u32>],
    epsilon_sd: f64,
) -> Result<SpiceTable> {
    let clean = streams
        .iter()
        .map(|s| model.forward(s, &mut model.new_cache()))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    for head in acts.iter().flatten() {
        let m = metric_theorem(head)?;
        let (layer, kv_head) = (head.layer, head.kv_head);
        entries.extend(spice_table_with(layer, kv_head, &m.m, &head.values(), epsilon_sd, |delta| {
            output_kl(model, streams, &clean, &ValueShift { layer, kv_head, delta: delta.to_vec() })
        })?);
    }
    let mass: Vec<f64> = entries.iter().map(|e| e.mass).collect();
    let tox: Vec<f64> = entries.iter().map(|e| e.toxicity).collect();
    Ok(SpiceTable { epsilon_sd, spearman: spearman(&mass, &tox), entries })
}
