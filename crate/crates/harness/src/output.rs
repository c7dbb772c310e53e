//! Output files, the per-command manifest and wall-clock timings.
//!
//! `manifest.json` is deterministic: it lists every emitted file with its
//! SHA-256. Timings live in `timings.json`, which the manifest lists without
//! size or hash because wall-clock values differ between identical runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output root.
    pub path: String,
    /// Size and hash are `None` only for the timings file.
    pub bytes: Option<u64>,
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub kvlab_version: String,
    pub manifest_version: u32,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
    /// `computed` or `cached`.
    pub status: String,
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    // write then rename so an interrupted run never leaves a truncated file
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Precondition(format!("csv: {e}")))
}

/// Files emitted by one command under `<out>/<command>/`, plus shared cache
/// files it produced or reused.
pub struct Emitter {
    root: PathBuf,
    command: String,
    files: Vec<PathBuf>,
    timings: Vec<Timing>,
}

impl Emitter {
    pub fn new(root: &Path, command: &str) -> Self {
        Self { root: root.to_path_buf(), command: command.to_string(), files: Vec::new(), timings: Vec::new() }
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.command)
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.dir().join(name);
        write_bytes(&path, &csv_bytes(rows)?)?;
        self.files.push(path);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir().join(name);
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        write_bytes(&path, &bytes)?;
        self.files.push(path);
        Ok(())
    }

    /// Lists a file written elsewhere (e.g. the shared cache).
    pub fn record(&mut self, path: &Path) {
        if !self.files.iter().any(|p| p == path) {
            self.files.push(path.to_path_buf());
        }
    }

    pub fn time(&mut self, label: impl Into<String>, start: Instant, status: &str) {
        self.timings.push(Timing { label: label.into(), seconds: start.elapsed().as_secs_f64(), status: status.into() });
    }

    pub fn timings_push(&mut self, label: &str, seconds: f64, status: &str) {
        self.timings.push(Timing { label: label.into(), seconds, status: status.into() });
    }

    pub fn finish(mut self, config_hash: &str, seeds: &[u64]) -> Result<RunManifest> {
        let timings_path = self.dir().join(TIMINGS);
        let mut bytes = serde_json::to_vec_pretty(&self.timings)?;
        bytes.push(b'\n');
        write_bytes(&timings_path, &bytes)?;
        let mut files = Vec::with_capacity(self.files.len() + 1);
        self.files.sort();
        for p in &self.files {
            let data = read_bytes(p)?;
            files.push(FileEntry { path: self.relative(p), bytes: Some(data.len() as u64), sha256: Some(sha256_hex(&data)) });
        }
        files.push(FileEntry { path: self.relative(&timings_path), bytes: None, sha256: None });
        let manifest = RunManifest {
            command: self.command.clone(),
            config_hash: config_hash.to_string(),
            seeds: seeds.to_vec(),
            kvlab_version: env!("CARGO_PKG_VERSION").to_string(),
            manifest_version: MANIFEST_VERSION,
            files,
        };
        let mut m = serde_json::to_vec_pretty(&manifest)?;
        m.push(b'\n');
        write_bytes(&self.dir().join(MANIFEST), &m)?;
        Ok(manifest)
    }

    fn relative(&self, p: &Path) -> String {
        let rel = p.strip_prefix(&self.root).unwrap_or(p);
        rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }
}

/// Checks every hashed file of a manifest found under `root`; returns the
/// problems (missing or altered files).
pub fn verify_manifest(root: &Path, m: &RunManifest) -> Vec<String> {
    let mut problems = Vec::new();
    for f in &m.files {
        let Some(want) = &f.sha256 else { continue };
        match std::fs::read(root.join(&f.path)) {
            Ok(data) if &sha256_hex(&data) == want => {}
            Ok(_) => problems.push(format!("{} does not match its recorded hash", f.path)),
            Err(_) => problems.push(format!("{} is missing", f.path)),
        }
    }
    problems
}
