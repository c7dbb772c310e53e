#![allow(dead_code)]

use std::path::{Path, PathBuf};

use kvlab::ExperimentConfig;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

/// A tiny two-seed config: every command finishes in well under a second.
pub fn small() -> ExperimentConfig {
    ExperimentConfig::load(&fixture("small.toml")).unwrap()
}

pub fn small_mha() -> ExperimentConfig {
    let mut cfg = small();
    cfg.model.query_heads = 2;
    cfg.model.kv_heads = 2;
    cfg.seeds = vec![5];
    cfg
}
