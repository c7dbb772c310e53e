//! Experiment configuration (TOML). Every field has a default, so an empty
//! file is a valid config; `kvlab print-config` dumps the effective values.

use std::path::{Path, PathBuf};

use kvlab_core::calibration::Aggregation;
use kvlab_core::compressor::{budget, CompressionScheme};
use kvlab_core::model::data::PhraseSpec;
use kvlab_core::model::{ModelConfig, TrainSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seeds; every seed is an independent replicate (model, data, bases).
    pub seeds: Vec<u64>,
    /// Output directory for all commands.
    pub out: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub calibration: CalibrationSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub ablation: AblationSection,
    pub theory: TheorySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// 0 builds an attention-only model.
    pub mlp_hidden: usize,
    /// Load this weight file instead of training (shape must match the fields above).
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub phrases: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub successors: usize,
    pub noise: f64,
    /// Tokens in the training stream.
    pub train_tokens: usize,
    /// Read tokens from this file instead of the phrase machine; it is split
    /// 80/10/10 into train, calibration and evaluation.
    pub token_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub sequences: usize,
    pub seq_len: usize,
    /// alpha-mean, arithmetic, geometric or harmonic.
    pub aggregation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sequences: usize,
    pub seq_len: usize,
    /// Clean top-2 score gaps for the conditioned flip rate; the first is the
    /// headline value.
    pub gap_thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Bits per value dimension; each budget b adds the matched group
    /// `v=int<b>`, `v=rank<d·b/16>` and (with `hybrids`) `v=rank<d/2>-int<2b>`.
    pub budgets: Vec<u8>,
    pub hybrids: bool,
    /// Extra schemes evaluated alongside the budget groups.
    pub schemes: Vec<String>,
    /// Extra groups that must share a data-bit budget.
    pub matched: Vec<Vec<String>>,
    /// Bit widths for the joint K×V grid; `fp` is always included.
    pub joint_bits: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub bits: u8,
    pub bases: Vec<String>,
    /// Extra random bases for the spread stability report.
    pub random_bases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub bits: Vec<u8>,
    pub keys: usize,
    pub monte_carlo_samples: usize,
    pub sigma_small: f64,
    pub sigma_large: f64,
    pub certificate_instances: usize,
    pub certificate_trials: usize,
    pub certificate_max_dim: usize,
    pub rs_instances: usize,
    pub rs_dim: usize,
    pub rs_rank: usize,
    /// `‖Δ‖₂/δ_min` values swept for the convergence table.
    pub rs_ratios: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            out: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            calibration: CalibrationSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            ablation: AblationSection::default(),
            theory: TheorySection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { layers: 4, query_heads: 4, kv_heads: 1, head_dim: 32, vocab: 64, max_seq: 64, mlp_hidden: 128, file: None }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let p = PhraseSpec::default();
        Self {
            phrases: p.phrases,
            min_len: p.min_len,
            max_len: p.max_len,
            successors: p.successors,
            noise: p.noise,
            train_tokens: 20_000,
            token_file: None,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 400, batch: 4, seq_len: 64, lr: 3e-3, clip: 1.0 }
    }
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            sequences: kvlab_core::calibration::DEFAULT_CALIBRATION_SEQUENCES,
            seq_len: 64,
            aggregation: Aggregation::default().to_string(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { sequences: 64, seq_len: 64, gap_thresholds: vec![kvlab_core::instrument::DEFAULT_GAP_THRESHOLD] }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { budgets: vec![2, 4, 8], hybrids: true, schemes: vec![], matched: vec![], joint_bits: vec![8, 4] }
    }
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { bits: 4, bases: ["original", "theorem", "pca", "random"].map(String::from).to_vec(), random_bases: 5 }
    }
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            bits: vec![2, 3, 4, 8],
            keys: 16,
            monte_carlo_samples: 1_000_000,
            sigma_small: 1e-3,
            sigma_large: 100.0,
            certificate_instances: 20,
            certificate_trials: 10_000,
            certificate_max_dim: 6,
            rs_instances: 50,
            rs_dim: 8,
            rs_rank: 2,
            rs_ratios: vec![0.01, 0.05, 0.1, 0.2, 0.5],
        }
    }
}

fn cfg_err(m: impl Into<String>) -> HarnessError {
    HarnessError::Config(m.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Model shape for a replicate; the init seed comes from the root seed.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            query_heads: m.query_heads,
            kv_heads: m.kv_heads,
            head_dim: m.head_dim,
            vocab: m.vocab,
            max_seq: m.max_seq,
            mlp_hidden: m.mlp_hidden,
            seed: kvlab_core::seed::derive(seed, "model/init"),
        }
    }

    pub fn phrase_spec(&self) -> PhraseSpec {
        let d = &self.data;
        PhraseSpec { phrases: d.phrases, min_len: d.min_len, max_len: d.max_len, successors: d.successors, noise: d.noise }
    }

    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        let t = &self.train;
        TrainSpec {
            steps: t.steps,
            batch: t.batch,
            seq_len: t.seq_len,
            lr: t.lr,
            clip: t.clip,
            seed: kvlab_core::seed::derive(seed, "train"),
        }
    }

    pub fn aggregation(&self) -> Result<Aggregation> {
        self.calibration.aggregation.parse().map_err(|e: kvlab_core::Error| cfg_err(e.to_string()))
    }

    /// Headline gap threshold for the conditioned flip rate.
    pub fn gap_threshold(&self) -> f64 {
        self.eval.gap_thresholds.first().copied().unwrap_or(0.0)
    }

    /// Budget groups from `sweep.budgets` followed by the explicit groups.
    pub fn matched_groups(&self) -> Result<Vec<MatchedGroup>> {
        let d = self.model.head_dim;
        let mut groups = Vec::new();
        for &b in &self.sweep.budgets {
            let bits = d * b as usize;
            if !bits.is_multiple_of(16) {
                return Err(cfg_err(format!("budget {b} bits/dim gives a fractional FP16 rank at head_dim {d}")));
            }
            let mut schemes = vec![format!("v=int{b}"), format!("v=rank{}", bits / 16)];
            if self.sweep.hybrids && d.is_multiple_of(2) && 2 * b <= 16 {
                schemes.push(format!("v=rank{}-int{}", d / 2, 2 * b));
            }
            groups.push(MatchedGroup { label: format!("{b}bit"), schemes: parse_all(&schemes)? });
        }
        for (i, g) in self.sweep.matched.iter().enumerate() {
            groups.push(MatchedGroup { label: format!("matched{i}"), schemes: parse_all(g)? });
        }
        Ok(groups)
    }

    /// Every scheme the sweep evaluates, in report order, without duplicates.
    pub fn sweep_schemes(&self) -> Result<Vec<CompressionScheme>> {
        let mut out: Vec<CompressionScheme> = vec![CompressionScheme::identity()];
        let push = |s: CompressionScheme, out: &mut Vec<CompressionScheme>| {
            if !out.contains(&s) {
                out.push(s);
            }
        };
        for g in self.matched_groups()? {
            g.schemes.into_iter().for_each(|s| push(s, &mut out));
        }
        for s in parse_all(&self.sweep.schemes)? {
            push(s, &mut out);
        }
        Ok(out)
    }

    /// The joint K×V grid, `fp` plus each of `joint_bits` on each side.
    pub fn joint_grid(&self) -> Result<Vec<CompressionScheme>> {
        let mut sides = vec!["fp".to_string()];
        sides.extend(self.sweep.joint_bits.iter().map(|b| format!("int{b}")));
        let mut out = Vec::new();
        for k in &sides {
            for v in &sides {
                out.push(parse_scheme(&format!("k={k} v={v}"))?);
            }
        }
        Ok(out)
    }

    /// Ablation schemes: `v=int<b>@<basis>` per configured basis.
    pub fn ablation_schemes(&self, seed: u64) -> Result<Vec<(String, CompressionScheme)>> {
        let b = self.ablation.bits;
        self.ablation
            .bases
            .iter()
            .map(|name| {
                let basis = if name == "random" { format!("random{}", random_basis_seed(seed, 0)) } else { name.clone() };
                Ok((name.clone(), parse_scheme(&format!("v=int{b}@{basis}"))?))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(cfg_err("seeds must be distinct"));
        }
        self.model_config(0).validate()?;
        kvlab_core::model::data::PhraseMachine::new(self.model.vocab, self.phrase_spec(), 0)?;
        let max_seq = self.model.max_seq;
        for (name, len) in [
            ("train.seq_len", self.train.seq_len),
            ("calibration.seq_len", self.calibration.seq_len),
            ("eval.seq_len", self.eval.seq_len),
        ] {
            if len < 2 || len > max_seq {
                return Err(cfg_err(format!("{name} = {len} must lie in 2..={max_seq}")));
            }
        }
        if self.train.batch == 0 || self.train.lr <= 0.0 || self.train.clip <= 0.0 {
            return Err(cfg_err("train.batch, train.lr and train.clip must be positive"));
        }
        if self.data.token_file.is_none() && self.data.train_tokens < self.train.seq_len + 1 {
            return Err(cfg_err("data.train_tokens must exceed train.seq_len"));
        }
        if self.calibration.sequences == 0 || self.eval.sequences == 0 {
            return Err(cfg_err("calibration.sequences and eval.sequences must be positive"));
        }
        self.aggregation()?;
        if self.eval.gap_thresholds.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(cfg_err("gap thresholds must be finite and non-negative"));
        }
        let d = self.model.head_dim;
        for g in self.matched_groups()? {
            g.check(d)?;
        }
        for s in self.sweep_schemes()?.iter().chain(&self.joint_grid()?) {
            s.validate(d, self.model.layers)?;
        }
        if !(2..=16).contains(&self.ablation.bits) {
            return Err(cfg_err("ablation.bits must lie in 2..=16"));
        }
        self.ablation_schemes(0)?;
        let t = &self.theory;
        if t.bits.iter().any(|b| !(2..=16).contains(b)) {
            return Err(cfg_err("theory.bits must lie in 2..=16"));
        }
        if t.keys < 2 || t.monte_carlo_samples < 10_000 {
            return Err(cfg_err("theory.keys must be ≥ 2 and theory.monte_carlo_samples ≥ 10000"));
        }
        if !(1..=kvlab_core::theory::MAX_EXHAUSTIVE_DIM).contains(&t.certificate_max_dim) || t.certificate_max_dim < 2 {
            return Err(cfg_err(format!(
                "theory.certificate_max_dim must lie in 2..={}",
                kvlab_core::theory::MAX_EXHAUSTIVE_DIM
            )));
        }
        if t.rs_rank == 0 || t.rs_rank >= t.rs_dim {
            return Err(cfg_err("theory.rs_rank must lie in 1..rs_dim"));
        }
        Ok(())
    }

    /// Hash of everything that determines results except the seed list and
    /// output location, so runs that differ only in seeds can be merged.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

/// Seed of the `k`-th random basis for a replicate.
pub fn random_basis_seed(seed: u64, k: usize) -> u64 {
    kvlab_core::seed::derive(seed, &format!("basis/random/{k}")) >> 16
}

pub fn parse_scheme(s: &str) -> Result<CompressionScheme> {
    s.parse().map_err(|e: kvlab_core::Error| cfg_err(e.to_string()))
}

fn parse_all(v: &[String]) -> Result<Vec<CompressionScheme>> {
    v.iter().map(|s| parse_scheme(s)).collect()
}

/// Schemes that must store identical data bits per token per head.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedGroup {
    pub label: String,
    pub schemes: Vec<CompressionScheme>,
}

impl MatchedGroup {
    /// Data bits of the group, or an error naming the mismatched pair.
    pub fn check(&self, head_dim: usize) -> Result<usize> {
        let first = self.schemes.first().ok_or_else(|| cfg_err(format!("matched group {} is empty", self.label)))?;
        let want = budget(first, head_dim, 1).data_bits_per_token_per_head;
        for s in &self.schemes[1..] {
            let got = budget(s, head_dim, 1).data_bits_per_token_per_head;
            if got != want {
                return Err(cfg_err(format!(
                    "matched group {}: `{first}` stores {want} bits but `{s}` stores {got}",
                    self.label
                )));
            }
        }
        Ok(want)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
