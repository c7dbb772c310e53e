use std::path::Path;
use std::time::Instant;

use kvlab_core::compressor::CompressionScheme;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{random_basis_seed, parse_scheme, ExperimentConfig};
use crate::error::Result;
use crate::output::Emitter;
use crate::pipeline::{self, mean_std, EvalRow, Replicate};

fn replicates(cfg: &ExperimentConfig, out: &Path, em: &mut Emitter) -> Result<Vec<Replicate>> {
    let reps =
        cfg.seeds.par_iter().map(|&s| pipeline::replicate(cfg, s, out)).collect::<Result<Vec<_>>>()?;
    for r in &reps {
        for f in &r.files {
            if f.starts_with(out) {
                em.record(f);
            }
        }
        for (label, secs, status) in &r.timings {
            em.timings_push(label, *secs, status.as_str());
        }
    }
    Ok(reps)
}

#[derive(Debug, Serialize)]
struct MetricRow {
    seed: u64,
    side: String,
    kind: String,
    layer: usize,
    kv_head: usize,
    sequences: usize,
    trace: f64,
    min_relative_eigenvalue: f64,
}

#[derive(Debug, Serialize)]
struct CalibrationSummary {
    config_hash: String,
    aggregation: String,
    /// Metric matrices per (seed, side, kind); `layers × kv_heads` each.
    counts: Vec<(u64, String, String, usize)>,
}

pub fn calibrate(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let mut em = Emitter::new(out, "calibrate");
    let reps = replicates(cfg, out, &mut em)?;
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for r in &reps {
        for m in &r.bundle.metrics {
            let side = m.provenance.side.map_or("value".into(), |s| s.to_string());
            rows.push(MetricRow {
                seed: r.seed,
                side: side.clone(),
                kind: m.kind.to_string(),
                layer: m.provenance.layer,
                kv_head: m.provenance.kv_head,
                sequences: m.provenance.sequences,
                trace: m.m.trace(),
                min_relative_eigenvalue: m.min_relative_eigenvalue()?,
            });
            let key = (r.seed, side, m.kind.to_string());
            match counts.iter_mut().find(|c: &&mut (u64, String, String, usize)| (c.0, &c.1, &c.2) == (key.0, &key.1, &key.2)) {
                Some(c) => c.3 += 1,
                None => counts.push((key.0, key.1, key.2, 1)),
            }
        }
    }
    em.csv("metrics.csv", &rows)?;
    em.json(
        "calibration.json",
        &CalibrationSummary { config_hash: cfg.hash(), aggregation: cfg.calibration.aggregation.clone(), counts },
    )?;
    let status: Vec<String> =
        reps.iter().map(|r| format!("seed {}: {}", r.seed, r.timings.iter().map(|t| t.2.as_str()).collect::<Vec<_>>().join("+"))).collect();
    em.finish(&cfg.hash(), &cfg.seeds)?;
    Ok(status.join("\n"))
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    scheme: String,
    family: String,
    data_bits: usize,
    seeds: usize,
    ppl_mean: f64,
    ppl_std: f64,
    ppl_delta_mean: f64,
    attention_kl_mean: f64,
    attention_kl_std: f64,
    flip_rate_mean: f64,
    gap_flip_rate_mean: f64,
}

#[derive(Debug, Serialize)]
struct MarginRow {
    group: String,
    data_bits: usize,
    seed: u64,
    quant_scheme: String,
    other_scheme: String,
    quant_ppl: f64,
    other_ppl: f64,
    /// `other − quant`; positive when quantization wins.
    margin_ppl: f64,
}

#[derive(Debug, Serialize)]
struct JointRow {
    key: String,
    value: String,
    seed: u64,
    kv_fraction_of_fp16: f64,
    ppl: f64,
    ppl_delta: f64,
}

#[derive(Debug, Serialize)]
struct ParetoRow {
    family: String,
    scheme: String,
    data_bits: usize,
    bits_per_dim: f64,
    ppl_mean: f64,
    ppl_std: f64,
}

#[derive(Debug, Serialize)]
struct SweepDetail<'a> {
    config_hash: String,
    rows: &'a [EvalRow],
    per_position_attention_kl: Vec<(String, u64, Vec<f64>)>,
    extra_gap_flip_rates: Vec<(String, u64, Vec<(f64, f64)>)>,
}

fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.scheme.as_str()) {
            order.push(&r.scheme);
        }
    }
    order
        .into_iter()
        .map(|s| {
            let g: Vec<&EvalRow> = rows.iter().filter(|r| r.scheme == s).collect();
            let col = |f: fn(&EvalRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (pm, ps) = mean_std(&col(|r| r.ppl));
            let (km, ks) = mean_std(&col(|r| r.attention_kl));
            SummaryRow {
                scheme: s.to_string(),
                family: g[0].family.clone(),
                data_bits: g[0].data_bits,
                seeds: g.len(),
                ppl_mean: pm,
                ppl_std: ps,
                ppl_delta_mean: mean_std(&col(|r| r.ppl_delta)).0,
                attention_kl_mean: km,
                attention_kl_std: ks,
                flip_rate_mean: mean_std(&col(|r| r.flip_rate)).0,
                gap_flip_rate_mean: mean_std(&col(|r| r.gap_flip_rate)).0,
            }
        })
        .collect()
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    // budget guard before any compute
    let groups = cfg.matched_groups()?;
    let group_bits = groups.iter().map(|g| g.check(cfg.model.head_dim)).collect::<Result<Vec<_>>>()?;
    let schemes = cfg.sweep_schemes()?;
    let joint = cfg.joint_grid()?;

    let mut em = Emitter::new(out, "sweep");
    let reps = replicates(cfg, out, &mut em)?;
    let t = Instant::now();
    let all: Vec<&CompressionScheme> = schemes.iter().chain(&joint).collect();
    let jobs: Vec<(&Replicate, &CompressionScheme)> = reps.iter().flat_map(|r| all.iter().map(move |s| (r, *s))).collect();
    let evals = jobs.par_iter().map(|(r, s)| pipeline::evaluate(cfg, r, s)).collect::<Result<Vec<_>>>()?;
    em.time("evaluation", t, "computed");

    let per_rep = all.len();
    let mut rows = Vec::new();
    let mut joint_rows = Vec::new();
    let mut positions = Vec::new();
    let mut extra = Vec::new();
    for (i, e) in evals.iter().enumerate() {
        let s = all[i % per_rep];
        if i % per_rep < schemes.len() {
            rows.push(e.row.clone());
            positions.push((e.row.scheme.clone(), e.row.seed, e.report.attention_kl.per_position.clone()));
            extra.push((e.row.scheme.clone(), e.row.seed, e.extra_gap_rates.clone()));
        } else {
            let kv = kvlab_core::compressor::budget(s, cfg.model.head_dim, cfg.eval.seq_len);
            joint_rows.push(JointRow {
                key: s.key.paradigm.to_string(),
                value: s.value.paradigm.to_string(),
                seed: e.row.seed,
                kv_fraction_of_fp16: kv.kv_fraction_of_fp16(),
                ppl: e.row.ppl,
                ppl_delta: e.row.ppl_delta,
            });
        }
    }

    let mut margins = Vec::new();
    for (g, bits) in groups.iter().zip(&group_bits) {
        let Some(q) = g.schemes.iter().find(|s| s.value.paradigm.family() == "quant" && s.key.paradigm.is_identity())
        else {
            continue;
        };
        let (qs, qn) = (q.to_string(), q);
        for other in g.schemes.iter().filter(|s| *s != qn) {
            let os = other.to_string();
            for &seed in &cfg.seeds {
                let find = |name: &str| rows.iter().find(|r| r.scheme == name && r.seed == seed).map(|r| r.ppl);
                let (Some(qp), Some(op)) = (find(&qs), find(&os)) else { continue };
                margins.push(MarginRow {
                    group: g.label.clone(),
                    data_bits: *bits,
                    seed,
                    quant_scheme: qs.clone(),
                    other_scheme: os.clone(),
                    quant_ppl: qp,
                    other_ppl: op,
                    margin_ppl: op - qp,
                });
            }
        }
    }

    let summary = summarize(&rows);
    let d = cfg.model.head_dim as f64;
    let pareto: Vec<ParetoRow> = summary
        .iter()
        .map(|s| ParetoRow {
            family: s.family.clone(),
            scheme: s.scheme.clone(),
            data_bits: s.data_bits,
            bits_per_dim: s.data_bits as f64 / d,
            ppl_mean: s.ppl_mean,
            ppl_std: s.ppl_std,
        })
        .collect();

    em.csv("rows.csv", &rows)?;
    em.csv("summary.csv", &summary)?;
    em.csv("margins.csv", &margins)?;
    em.csv("joint.csv", &joint_rows)?;
    em.csv("pareto.csv", &pareto)?;
    em.json(
        "sweep.json",
        &SweepDetail { config_hash: cfg.hash(), rows: &rows, per_position_attention_kl: positions, extra_gap_flip_rates: extra },
    )?;
    em.finish(&cfg.hash(), &cfg.seeds)?;
    let lines: Vec<String> = summary
        .iter()
        .map(|s| format!("{:<24} bits {:>4}  ppl {:.4} ± {:.4}  attn-KL {:.5}", s.scheme, s.data_bits, s.ppl_mean, s.ppl_std, s.attention_kl_mean))
        .collect();
    Ok(lines.join("\n"))
}

#[derive(Debug, Serialize)]
struct AblationRow {
    seed: u64,
    basis: String,
    scheme: String,
    ppl: f64,
}

#[derive(Debug, Serialize)]
struct AblationSummary {
    seed: u64,
    bits: u8,
    bases: usize,
    spread_ppl: f64,
    quant_ppl: f64,
    projection_scheme: String,
    projection_ppl: f64,
    /// `projection − quant(original)`
    gap_ppl: f64,
    spread_over_gap: f64,
    /// Reference spread from the full-scale study.
    reference_spread_ppl: f64,
}

#[derive(Debug, Serialize)]
struct RandomStability {
    seed: u64,
    random_bases: usize,
    ppl_mean: f64,
    ppl_std: f64,
    spread_ppl: f64,
}

fn spread(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max) - x.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn basis_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let mut em = Emitter::new(out, "basis-ablation");
    let reps = replicates(cfg, out, &mut em)?;
    let t = Instant::now();
    let b = cfg.ablation.bits;
    let proj = pipeline::ablation_projection(cfg, cfg.model.head_dim)?;
    let quant = parse_scheme(&format!("v=int{b}"))?;
    let mut jobs: Vec<(&Replicate, String, CompressionScheme)> = Vec::new();
    for r in &reps {
        for (name, s) in cfg.ablation_schemes(r.seed)? {
            jobs.push((r, name, s));
        }
        jobs.push((r, "projection".into(), proj.clone()));
        jobs.push((r, "quant".into(), quant.clone()));
        for k in 0..cfg.ablation.random_bases {
            let s = parse_scheme(&format!("v=int{b}@random{}", random_basis_seed(r.seed, k)))?;
            jobs.push((r, format!("random/{k}"), s));
        }
    }
    let ppl = jobs.par_iter().map(|(r, _, s)| Ok(pipeline::evaluate(cfg, r, s)?.row.ppl)).collect::<Result<Vec<f64>>>()?;
    em.time("evaluation", t, "computed");

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut stability = Vec::new();
    for r in &reps {
        let mine: Vec<(&String, &CompressionScheme, f64)> =
            jobs.iter().zip(&ppl).filter(|(j, _)| j.0.seed == r.seed).map(|(j, &p)| (&j.1, &j.2, p)).collect();
        let get = |n: &str| mine.iter().find(|m| m.0 == n).map(|m| m.2).expect("job present");
        let bases: Vec<f64> = cfg.ablation.bases.iter().map(|n| get(n)).collect();
        for (n, s, p) in mine.iter().filter(|m| cfg.ablation.bases.contains(m.0)) {
            rows.push(AblationRow { seed: r.seed, basis: (*n).clone(), scheme: s.to_string(), ppl: *p });
        }
        let (qp, pp) = (get("quant"), get("projection"));
        let sp = spread(&bases);
        summary.push(AblationSummary {
            seed: r.seed,
            bits: b,
            bases: bases.len(),
            spread_ppl: sp,
            quant_ppl: qp,
            projection_scheme: proj.to_string(),
            projection_ppl: pp,
            gap_ppl: pp - qp,
            spread_over_gap: sp / (pp - qp),
            reference_spread_ppl: 0.4,
        });
        let rnd: Vec<f64> = mine.iter().filter(|m| m.0.starts_with("random/")).map(|m| m.2).collect();
        if !rnd.is_empty() {
            let (m, s) = mean_std(&rnd);
            stability.push(RandomStability { seed: r.seed, random_bases: rnd.len(), ppl_mean: m, ppl_std: s, spread_ppl: spread(&rnd) });
        }
    }
    em.csv("ablation.csv", &rows)?;
    em.csv("summary.csv", &summary)?;
    em.csv("random_stability.csv", &stability)?;
    em.finish(&cfg.hash(), &cfg.seeds)?;
    Ok(summary
        .iter()
        .map(|s| format!("seed {}: spread {:.4} PPL vs gap {:.4} PPL ({:.1}%)", s.seed, s.spread_ppl, s.gap_ppl, 100.0 * s.spread_over_gap))
        .collect::<Vec<_>>()
        .join("\n"))
}

pub fn theory(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let mut em = Emitter::new(out, "theory");
    let t = Instant::now();
    let report = crate::theory_report::run(cfg)?;
    em.time("theory", t, "computed");
    em.csv("asymmetry.csv", &report.asymmetry)?;
    em.csv("certificates.csv", &report.certificates)?;
    em.csv("rs.csv", &report.rs)?;
    em.json("theory.json", &report)?;
    em.finish(&cfg.hash(), &cfg.seeds)?;
    Ok(report.headline())
}
