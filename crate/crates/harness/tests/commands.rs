mod common;

use std::collections::BTreeMap;
use std::path::Path;

use kvlab::commands::{basis_ablation, calibrate, sweep, theory};
use kvlab::output::RunManifest;
use kvlab::report::report;

fn manifest(dir: &Path, cmd: &str) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(cmd).join("manifest.json")).unwrap()).unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn calibrate_reuses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small();
    let first = calibrate(&cfg, dir.path()).unwrap();
    assert!(first.contains("computed"), "{first}");
    let second = calibrate(&cfg, dir.path()).unwrap();
    assert!(second.contains("cached") && !second.contains("computed"), "{second}");
    // a changed config gets its own cache entries
    let mut other = cfg.clone();
    other.train.steps += 1;
    assert!(calibrate(&other, dir.path()).unwrap().contains("computed"));
}

#[test]
fn mha_toy_has_one_metric_per_layer_and_head() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_mha();
    calibrate(&cfg, dir.path()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("calibrate/metrics.csv")).unwrap();
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        *counts.entry((rec[1].to_string(), rec[2].to_string())).or_default() += 1;
    }
    assert!(!counts.is_empty());
    let want = cfg.model.layers * cfg.model.kv_heads;
    for (k, n) in &counts {
        assert_eq!(*n, want, "{k:?}");
    }
}

#[test]
fn manifests_hash_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small();
    sweep(&cfg, dir.path()).unwrap();
    let m = manifest(dir.path(), "sweep");
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.seeds, cfg.seeds);
    assert!(kvlab::output::verify_manifest(dir.path(), &m).is_empty());
    for f in &m.files {
        assert_eq!(f.sha256.is_none(), f.path.ends_with("timings.json"), "{}", f.path);
    }
    for name in ["rows.csv", "summary.csv", "margins.csv", "joint.csv", "pareto.csv", "sweep.json"] {
        assert!(m.files.iter().any(|f| f.path == format!("sweep/{name}")), "{name}");
    }
}

#[test]
fn sweep_rows_cover_every_scheme_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small();
    sweep(&cfg, dir.path()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("sweep/rows.csv")).unwrap();
    let rows: Vec<kvlab::pipeline::EvalRow> = rdr.deserialize().map(Result::unwrap).collect();
    let schemes = cfg.sweep_schemes().unwrap();
    assert_eq!(rows.len(), schemes.len() * cfg.seeds.len());
    for r in rows.iter().filter(|r| r.scheme == "identity") {
        assert_eq!(r.attention_kl, 0.0);
        assert_eq!(r.ppl, r.ppl_identity);
    }
}

#[test]
fn ablation_and_theory_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small();
    basis_ablation(&cfg, dir.path()).unwrap();
    theory(&cfg, dir.path()).unwrap();
    assert!(header(&dir.path().join("basis-ablation/summary.csv")).contains("spread_over_gap"));
    let rs = header(&dir.path().join("theory/rs.csv"));
    assert!(rs.contains("error_order2") && rs.contains("coefficient_growth_mean"));
    let certs = std::fs::read_to_string(dir.path().join("theory/certificates.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(certs.as_bytes());
    for rec in rdr.deserialize::<BTreeMap<String, String>>() {
        let rec = rec.unwrap();
        assert_eq!(rec["trial_violations"], "0");
        assert_eq!(rec["axis_violations"], "0");
    }
}

#[test]
fn report_without_runs_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = report(dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("no runs"), "{e}");
    assert_eq!(report(&dir.path().join("missing")).unwrap_err().exit_code(), 3);
}

#[test]
fn report_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    sweep(&common::small(), dir.path()).unwrap();
    report(dir.path()).unwrap();
    for name in ["consolidated", "summary", "plot_data"] {
        let want = std::fs::read_to_string(common::fixture(&format!("{name}_header.csv"))).unwrap();
        assert_eq!(header(&dir.path().join(format!("report/{name}.csv"))), want.trim_end(), "{name}");
    }
}

#[test]
fn report_merges_runs_with_one_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = common::small();
    a.seeds = vec![1];
    let mut b = a.clone();
    b.seeds = vec![2];
    sweep(&a, &dir.path().join("a")).unwrap();
    sweep(&b, &dir.path().join("b")).unwrap();
    // a duplicate of run a
    sweep(&a, &dir.path().join("c")).unwrap();
    let msg = report(dir.path()).unwrap();
    assert!(msg.contains("3 runs merged into 1 config groups"), "{msg}");
    let mut rdr = csv::Reader::from_path(dir.path().join("report/summary.csv")).unwrap();
    for rec in rdr.deserialize::<BTreeMap<String, String>>() {
        assert_eq!(rec.unwrap()["seeds"], "2");
    }
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report/report.json")).unwrap()).unwrap();
    assert_eq!(rep["duplicates"].as_array().unwrap().len(), a.sweep_schemes().unwrap().len());
}

#[test]
fn report_flags_partial_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small();
    sweep(&cfg, &dir.path().join("good")).unwrap();
    sweep(&cfg, &dir.path().join("bad")).unwrap();
    std::fs::remove_file(dir.path().join("bad/sweep/pareto.csv")).unwrap();
    let msg = report(dir.path()).unwrap();
    assert!(msg.contains("1 runs merged"), "{msg}");
    assert!(msg.contains("partial run bad") && msg.contains("pareto.csv is missing"), "{msg}");
}
