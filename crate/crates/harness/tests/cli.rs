mod common;

use std::path::Path;
use std::process::Command;

fn kvlab(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_kvlab")).args(args).current_dir(cwd).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = common::fixture("small.toml");
    let small = small.to_str().unwrap();
    std::fs::write(d.join("bad.toml"), "bogus = 1\n").unwrap();
    std::fs::write(d.join("mismatch.toml"), "[sweep]\nmatched = [[\"v=int4\", \"v=rank4\"]]\n").unwrap();
    std::fs::write(d.join("nomodel.toml"), "[model]\nfile = \"missing.kvlm\"\n").unwrap();

    assert_eq!(kvlab(&["--config", small, "--out", "o", "theory"], d).0, 0);
    assert_eq!(kvlab(&["--config", "bad.toml", "sweep"], d).0, 2);
    assert_eq!(kvlab(&["--config", "absent.toml", "sweep"], d).0, 2);
    assert_eq!(kvlab(&["--config", "mismatch.toml", "sweep"], d).0, 2);
    let (code, _, err) = kvlab(&["--config", "nomodel.toml", "--seed", "1", "sweep"], d);
    assert_eq!(code, 3);
    assert!(err.contains("missing.kvlm") && err.contains("kvlab calibrate"), "{err}");
    let (code, _, err) = kvlab(&["report", "empty"], d);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = kvlab(&["--seed", "7", "print-config"], dir.path());
    assert_eq!(code, 0);
    std::fs::write(dir.path().join("c.toml"), &out).unwrap();
    let (code, again, _) = kvlab(&["--config", "c.toml", "print-config"], dir.path());
    assert_eq!(code, 0);
    assert_eq!(out, again);
    assert!(out.contains("seeds = [7]") || out.contains("seeds = [\n    7,\n]"), "{out}");
}

#[test]
fn seed_flag_runs_one_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let small = common::fixture("small.toml");
    let (code, _, err) = kvlab(&["--config", small.to_str().unwrap(), "--out", "o", "--seed", "4", "calibrate"], dir.path());
    assert_eq!(code, 0, "{err}");
    let files: Vec<_> = std::fs::read_dir(dir.path().join("o/cache/models")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 1);
    assert!(files[0].to_string_lossy().ends_with("-seed4.kvlm"));
}
