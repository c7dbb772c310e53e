//! `kvlab report`: merges sweep runs found under a directory.
//!
//! A run is any directory holding `sweep/manifest.json`: the directory
//! itself or one of its immediate children. Runs whose files are missing or
//! altered are listed as partial and left out of the merge; complete runs
//! with the same config hash are merged along the seed dimension.
//!
//! Column schema (stable):
//! - `consolidated.csv`: `config_hash,run,` followed by the sweep `rows.csv` columns
//! - `summary.csv`: `config_hash,scheme,family,data_bits,seeds,ppl_mean,ppl_std,attention_kl_mean,attention_kl_std,gap_flip_rate_mean`
//! - `plot_data.csv`: `config_hash,scheme,family,budget_bits,bits_per_dim,ppl,seed`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::sha256_hex;
use crate::error::{HarnessError, Result};
use crate::output::{read_bytes, verify_manifest, Emitter, RunManifest, MANIFEST};
use crate::pipeline::{mean_std, EvalRow};

#[derive(Debug, Clone, Serialize)]
pub struct ConsolidatedRow {
    pub config_hash: String,
    pub run: String,
    pub scheme: String,
    pub family: String,
    pub seed: u64,
    pub data_bits: usize,
    pub fraction_of_fp16: f64,
    pub ppl: f64,
    pub ppl_identity: f64,
    pub ppl_delta: f64,
    pub attention_kl: f64,
    pub attention_kl_std: f64,
    pub flip_rate: f64,
    pub gap_threshold: f64,
    pub gap_flip_rate: f64,
    pub compound_agreement: f64,
    pub layer_agreement: String,
}

impl ConsolidatedRow {
    fn new(config_hash: String, run: String, r: EvalRow) -> Self {
        Self {
            config_hash,
            run,
            scheme: r.scheme,
            family: r.family,
            seed: r.seed,
            data_bits: r.data_bits,
            fraction_of_fp16: r.fraction_of_fp16,
            ppl: r.ppl,
            ppl_identity: r.ppl_identity,
            ppl_delta: r.ppl_delta,
            attention_kl: r.attention_kl,
            attention_kl_std: r.attention_kl_std,
            flip_rate: r.flip_rate,
            gap_threshold: r.gap_threshold,
            gap_flip_rate: r.gap_flip_rate,
            compound_agreement: r.compound_agreement,
            layer_agreement: r.layer_agreement,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub scheme: String,
    pub family: String,
    pub data_bits: usize,
    pub seeds: usize,
    pub ppl_mean: f64,
    pub ppl_std: f64,
    pub attention_kl_mean: f64,
    pub attention_kl_std: f64,
    pub gap_flip_rate_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlotRow {
    pub config_hash: String,
    pub scheme: String,
    pub family: String,
    pub budget_bits: usize,
    pub bits_per_dim: f64,
    pub ppl: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunStatus {
    pub run: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Empty for complete runs.
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub runs: Vec<RunStatus>,
    pub groups: Vec<(String, Vec<String>)>,
    /// (config hash, scheme, seed) present in more than one run; the first run wins.
    pub duplicates: Vec<(String, String, u64)>,
}

fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.join("sweep").join(MANIFEST).is_file() {
        out.push(dir.to_path_buf());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut children: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    children.sort();
    out.extend(children.into_iter().filter(|p| p.join("sweep").join(MANIFEST).is_file()));
    Ok(out)
}

fn run_name(dir: &Path, run: &Path) -> String {
    match run.strip_prefix(dir) {
        Ok(p) if p.as_os_str().is_empty() => ".".into(),
        Ok(p) => p.to_string_lossy().into_owned(),
        Err(_) => run.to_string_lossy().into_owned(),
    }
}

pub fn report(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(HarnessError::Precondition(format!("no runs: {} is not a directory", dir.display())));
    }
    let runs = find_runs(dir)?;
    if runs.is_empty() {
        return Err(HarnessError::Precondition(format!(
            "no runs found under {} (expected <run>/sweep/{MANIFEST}; run `kvlab sweep --out <run>` first)",
            dir.display()
        )));
    }
    let mut statuses = Vec::new();
    let mut by_hash: BTreeMap<String, Vec<(String, Vec<EvalRow>)>> = BTreeMap::new();
    for run in &runs {
        let name = run_name(dir, run);
        let manifest: RunManifest = match serde_json::from_slice(&read_bytes(&run.join("sweep").join(MANIFEST))?) {
            Ok(m) => m,
            Err(e) => {
                statuses.push(RunStatus { run: name, config_hash: String::new(), seeds: vec![], problems: vec![format!("unreadable manifest: {e}")] });
                continue;
            }
        };
        let mut problems = verify_manifest(run, &manifest);
        if !manifest.files.iter().any(|f| f.path == "sweep/rows.csv") {
            problems.push("sweep/rows.csv not in manifest".into());
        }
        let mut rows = Vec::new();
        if problems.is_empty() {
            let mut rdr = csv::Reader::from_path(run.join("sweep").join("rows.csv"))?;
            for r in rdr.deserialize::<EvalRow>() {
                match r {
                    Ok(r) => rows.push(r),
                    Err(e) => {
                        problems.push(format!("rows.csv: {e}"));
                        break;
                    }
                }
            }
        }
        if problems.is_empty() {
            by_hash.entry(manifest.config_hash.clone()).or_default().push((name.clone(), rows));
        }
        statuses.push(RunStatus { run: name, config_hash: manifest.config_hash, seeds: manifest.seeds, problems });
    }

    let mut consolidated = Vec::new();
    let mut summary = Vec::new();
    let mut plot = Vec::new();
    let mut duplicates = Vec::new();
    let mut groups = Vec::new();
    for (hash, runs) in &by_hash {
        groups.push((hash.clone(), runs.iter().map(|r| r.0.clone()).collect()));
        let mut merged: Vec<(String, EvalRow)> = Vec::new();
        for (name, rows) in runs {
            for r in rows {
                if merged.iter().any(|(_, m)| m.scheme == r.scheme && m.seed == r.seed) {
                    duplicates.push((hash.clone(), r.scheme.clone(), r.seed));
                } else {
                    merged.push((name.clone(), r.clone()));
                }
            }
        }
        // scheme order of first appearance, then seed
        let mut order: Vec<String> = Vec::new();
        for (_, r) in &merged {
            if !order.contains(&r.scheme) {
                order.push(r.scheme.clone());
            }
        }
        merged.sort_by_key(|(_, r)| (order.iter().position(|s| *s == r.scheme), r.seed));
        for scheme in &order {
            let g: Vec<&EvalRow> = merged.iter().map(|(_, r)| r).filter(|r| &r.scheme == scheme).collect();
            let (pm, ps) = mean_std(&g.iter().map(|r| r.ppl).collect::<Vec<_>>());
            let (km, ks) = mean_std(&g.iter().map(|r| r.attention_kl).collect::<Vec<_>>());
            summary.push(SummaryRow {
                config_hash: hash.clone(),
                scheme: scheme.clone(),
                family: g[0].family.clone(),
                data_bits: g[0].data_bits,
                seeds: g.len(),
                ppl_mean: pm,
                ppl_std: ps,
                attention_kl_mean: km,
                attention_kl_std: ks,
                gap_flip_rate_mean: mean_std(&g.iter().map(|r| r.gap_flip_rate).collect::<Vec<_>>()).0,
            });
        }
        for (name, r) in merged {
            plot.push(PlotRow {
                config_hash: hash.clone(),
                scheme: r.scheme.clone(),
                family: r.family.clone(),
                budget_bits: r.data_bits,
                bits_per_dim: r.fraction_of_fp16 * 16.0,
                ppl: r.ppl,
                seed: r.seed,
            });
            consolidated.push(ConsolidatedRow::new(hash.clone(), name, r));
        }
    }

    let partial = statuses.iter().filter(|s| !s.problems.is_empty()).count();
    let mut em = Emitter::new(dir, "report");
    em.csv("consolidated.csv", &consolidated)?;
    em.csv("summary.csv", &summary)?;
    em.csv("plot_data.csv", &plot)?;
    let rep = Report { runs: statuses, groups, duplicates };
    em.json("report.json", &rep)?;
    let hashes: Vec<&str> = by_hash.keys().map(String::as_str).collect();
    let mut seeds: Vec<u64> = consolidated.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    em.finish(&sha256_hex(hashes.join(",").as_bytes()), &seeds)?;
    let mut msg = format!("{} runs merged into {} config groups", runs.len() - partial, by_hash.len());
    for s in rep.runs.iter().filter(|s| !s.problems.is_empty()) {
        msg.push_str(&format!("\npartial run {}: {}", s.run, s.problems.join("; ")));
    }
    Ok(msg)
}
