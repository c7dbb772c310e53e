//! Mechanism measurements linking compression damage to routing: attention
//! KL, top-1 flip rates (optionally gap-conditioned), spice ratios and
//! cross-layer propagation.
//!
//! Counting convention: every causal position of every layer and query head
//! is one routing decision. Position 0 has a single key, its score gap is
//! treated as infinite and it can never flip.

mod spice;

pub use spice::{output_kl, spice_table, spice_table_with, SpiceEntry, SpiceTable};

use crate::compressor::CodecTable;
use crate::error::{Error, Result};
use crate::linalg::{kl_divergence, log_sum_exp, mean_std, Matrix};
use crate::model::{ForwardOptions, Model, Trace};

/// Gap threshold for the conditioned flip rate when none is given.
pub const DEFAULT_GAP_THRESHOLD: f64 = 0.05;

/// Index of the largest entry (first on ties).
pub fn top1(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Difference between the largest and second-largest entries; infinite for
/// fewer than two entries.
pub fn top2_gap(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::INFINITY;
    }
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in x {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}

/// Whether a decision with clean top-2 gap `gap` counts at `threshold`
/// (threshold 0 counts everything).
pub fn gap_admits(gap: f64, threshold: f64) -> bool {
    threshold <= 0.0 || gap > threshold
}

/// Does the argmax move between clean and perturbed scores?
pub fn top1_flips(clean: &[f64], perturbed: &[f64]) -> bool {
    top1(clean) != top1(perturbed)
}

/// Per-sequence comparison of clean and compressed runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDamage {
    /// Mean attention-row KL over (layer, query head, position).
    pub attention_kl: f64,
    /// Mean attention KL at each position (over layers and heads).
    pub kl_by_position: Vec<f64>,
    /// (flips, decisions) per layer, unconditional.
    pub flips_by_layer: Vec<(usize, usize)>,
    /// (flips, decisions) among decisions whose clean gap exceeds the threshold.
    pub gap_flips: (usize, usize),
    pub nll_clean: f64,
    pub nll_compressed: f64,
    pub predictions: usize,
}

fn nll(logits: &Matrix, tokens: &[u32]) -> f64 {
    (1..tokens.len()).map(|t| log_sum_exp(logits.row(t - 1)) - logits.row(t - 1)[tokens[t] as usize]).sum()
}

fn compare(clean: &Trace, lossy: &Trace, gap_threshold: f64) -> (f64, Vec<f64>, Vec<(usize, usize)>, (usize, usize)) {
    let n = clean.layers.first().map_or(0, |l| l.alpha.first().map_or(0, Matrix::rows));
    let mut kl_pos = vec![0.0; n];
    let mut per_pos_count = 0usize;
    let mut flips_by_layer = Vec::with_capacity(clean.layers.len());
    let mut gap_flips = (0, 0);
    for (cl, ll) in clean.layers.iter().zip(&lossy.layers) {
        let mut fl = (0, 0);
        for h in 0..cl.alpha.len() {
            let (ac, al) = (&cl.alpha[h], &ll.alpha[h]);
            let (sc, sl) = (&cl.scores[h], &ll.scores[h]);
            for t in 0..n {
                let vis = clean.offset + t + 1;
                kl_pos[t] += kl_divergence(&ac.row(t)[..vis], &al.row(t)[..vis]);
                let flip = top1_flips(&sc.row(t)[..vis], &sl.row(t)[..vis]);
                fl.1 += 1;
                fl.0 += usize::from(flip);
                if gap_admits(top2_gap(&sc.row(t)[..vis]), gap_threshold) {
                    gap_flips.1 += 1;
                    gap_flips.0 += usize::from(flip);
                }
            }
            per_pos_count += 1;
        }
        flips_by_layer.push(fl);
    }
    kl_pos.iter_mut().for_each(|x| *x /= per_pos_count.max(1) as f64);
    let mean = if n == 0 { 0.0 } else { kl_pos.iter().sum::<f64>() / n as f64 };
    (mean, kl_pos, flips_by_layer, gap_flips)
}

/// Runs one sequence clean and compressed and compares the two.
pub fn sequence_damage(
    model: &Model,
    codecs: &CodecTable,
    tokens: &[u32],
    gap_threshold: f64,
) -> Result<SequenceDamage> {
    let opts = ForwardOptions::capture();
    let (lc, tc) = model.forward_traced(tokens, &mut model.new_cache(), &opts)?;
    let (ll, tl) = model.compress(codecs)?.forward_traced(tokens, &opts)?;
    let (tc, tl) = (tc.expect("captured"), tl.expect("captured"));
    let (attention_kl, kl_by_position, flips_by_layer, gap_flips) = compare(&tc, &tl, gap_threshold);
    Ok(SequenceDamage {
        attention_kl,
        kl_by_position,
        flips_by_layer,
        gap_flips,
        nll_clean: nll(&lc, tokens),
        nll_compressed: nll(&ll, tokens),
        predictions: tokens.len().saturating_sub(1),
    })
}

fn check_streams(model: &Model, streams: &[Vec<u32>]) -> Result<()> {
    if streams.is_empty() || streams.iter().any(|s| s.len() < 2) {
        return Err(Error::arg("evaluation needs at least one stream of two or more tokens"));
    }
    if let Some(s) = streams.iter().find(|s| s.len() > model.config().max_seq) {
        return Err(Error::arg(format!("stream of {} tokens exceeds max_seq", s.len())));
    }
    Ok(())
}

fn damages(model: &Model, streams: &[Vec<u32>], codecs: &CodecTable, gap: f64) -> Result<Vec<SequenceDamage>> {
    check_streams(model, streams)?;
    streams.iter().map(|s| sequence_damage(model, codecs, s, gap)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionKl {
    pub mean: f64,
    /// Sample standard deviation across sequences.
    pub std: f64,
    pub per_sequence: Vec<f64>,
    /// Mean over sequences, layers and heads at each position.
    pub per_position: Vec<f64>,
}

fn summarize_kl(d: &[SequenceDamage]) -> AttentionKl {
    let per_sequence: Vec<f64> = d.iter().map(|x| x.attention_kl).collect();
    let (mean, std) = mean_std(&per_sequence);
    let len = d.iter().map(|x| x.kl_by_position.len()).max().unwrap_or(0);
    let per_position = (0..len)
        .map(|t| {
            let v: Vec<f64> = d.iter().filter_map(|x| x.kl_by_position.get(t).copied()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    AttentionKl { mean, std, per_sequence, per_position }
}

/// `KL(α_clean ‖ α_compressed)` averaged over positions, layers and query
/// heads, then summarized across sequences (each at most `max_seq` long).
pub fn attention_kl(model: &Model, streams: &[Vec<u32>], codecs: &CodecTable) -> Result<AttentionKl> {
    Ok(summarize_kl(&damages(model, streams, codecs, 0.0)?))
}

/// Fraction of routing decisions whose argmax changes, restricted to those
/// whose clean top-2 score gap exceeds `gap_threshold` (0 = all).
pub fn flip_rate(model: &Model, streams: &[Vec<u32>], codecs: &CodecTable, gap_threshold: f64) -> Result<f64> {
    let d = damages(model, streams, codecs, gap_threshold)?;
    let (f, n) = d.iter().fold((0, 0), |a, x| (a.0 + x.gap_flips.0, a.1 + x.gap_flips.1));
    Ok(if n == 0 { 0.0 } else { f as f64 / n as f64 })
}

/// Product of per-layer agreements, the compounded survival estimate under
/// independent errors across layers. An upper-bound model, not a measurement.
pub fn compound_agreement(per_layer: &[f64]) -> f64 {
    per_layer.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationProfile {
    pub per_layer_agreement: Vec<f64>,
    pub compound: f64,
}

fn agreement(d: &[SequenceDamage]) -> Vec<f64> {
    let layers = d.first().map_or(0, |x| x.flips_by_layer.len());
    (0..layers)
        .map(|l| {
            let (f, n) = d.iter().fold((0, 0), |a, x| (a.0 + x.flips_by_layer[l].0, a.1 + x.flips_by_layer[l].1));
            if n == 0 {
                1.0
            } else {
                1.0 - f as f64 / n as f64
            }
        })
        .collect()
}

pub fn propagation_profile(model: &Model, streams: &[Vec<u32>], codecs: &CodecTable) -> Result<PropagationProfile> {
    if model.config().layers < 2 {
        return Err(Error::arg("propagation needs at least two layers"));
    }
    let a = agreement(&damages(model, streams, codecs, 0.0)?);
    Ok(PropagationProfile { compound: compound_agreement(&a), per_layer_agreement: a })
}

/// Everything measured for one scheme on one model.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageReport {
    pub scheme: String,
    pub ppl: f64,
    pub ppl_identity: f64,
    pub ppl_delta_vs_identity: f64,
    pub attention_kl: AttentionKl,
    pub flip_rate: f64,
    pub gap_threshold: f64,
    pub gap_conditioned_flip_rate: f64,
    pub per_layer_top1_agreement: Vec<f64>,
    pub compound_agreement: f64,
}

/// Builds a [`DamageReport`] from one clean and one compressed pass per
/// sequence.
pub fn damage_report(
    model: &Model,
    streams: &[Vec<u32>],
    codecs: &CodecTable,
    gap_threshold: f64,
) -> Result<DamageReport> {
    let d = damages(model, streams, codecs, gap_threshold)?;
    let preds: usize = d.iter().map(|x| x.predictions).sum();
    let ppl_identity = (d.iter().map(|x| x.nll_clean).sum::<f64>() / preds as f64).exp();
    let ppl = (d.iter().map(|x| x.nll_compressed).sum::<f64>() / preds as f64).exp();
    let (f, n) = d.iter().flat_map(|x| &x.flips_by_layer).fold((0, 0), |a, x| (a.0 + x.0, a.1 + x.1));
    let (gf, gn) = d.iter().fold((0, 0), |a, x| (a.0 + x.gap_flips.0, a.1 + x.gap_flips.1));
    let per_layer = agreement(&d);
    Ok(DamageReport {
        scheme: codecs.scheme.to_string(),
        ppl,
        ppl_identity,
        ppl_delta_vs_identity: ppl - ppl_identity,
        attention_kl: summarize_kl(&d),
        flip_rate: if n == 0 { 0.0 } else { f as f64 / n as f64 },
        gap_threshold,
        gap_conditioned_flip_rate: if gn == 0 { 0.0 } else { gf as f64 / gn as f64 },
        compound_agreement: compound_agreement(&per_layer),
        per_layer_top1_agreement: per_layer,
    })
}
