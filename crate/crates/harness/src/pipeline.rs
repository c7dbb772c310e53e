//! Per-replicate building blocks: data splits, the trained model, the
//! calibration bundle and scheme evaluation. Models and bundles are cached
//! under `<out>/cache/` keyed by the config hash and seed.
//!
//! Seed tree for a replicate with root seed `s`:
//! `model/init`, `train` (window sampling), `data/language` (phrase bank),
//! `data/train`, `data/calibration`, `data/eval`, `basis/random/<k>`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use kvlab_core::calibration::{build_metrics, required_metrics, resolve_scheme, MetricBundle, MetricKind};
use kvlab_core::compressor::{budget, CompressionScheme, Side};
use kvlab_core::instrument::{damage_report, flip_rate, DamageReport};
use kvlab_core::model::data::{read_token_file, windows, PhraseMachine};
use kvlab_core::model::{capture_calibration, io, train_toy, Model};
use kvlab_core::seed::derive;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::output::{read_bytes, write_bytes};

/// Train / calibration / evaluation splits of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<u32>,
    pub calibration: Vec<Vec<u32>>,
    pub eval: Vec<Vec<u32>>,
}

pub fn splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let (cl, cn) = (cfg.calibration.seq_len, cfg.calibration.sequences);
    let (el, en) = (cfg.eval.seq_len, cfg.eval.sequences);
    if let Some(path) = &cfg.data.token_file {
        if !path.exists() {
            return Err(HarnessError::Precondition(format!(
                "token file {} not found; fix [data].token_file or remove it to use the synthetic phrase machine",
                path.display()
            )));
        }
        let tokens = read_token_file(path, cfg.model.vocab)?;
        let a = tokens.len() * 8 / 10;
        let b = tokens.len() * 9 / 10;
        let calibration: Vec<Vec<u32>> = windows(&tokens[a..b], cl).into_iter().take(cn).collect();
        let eval: Vec<Vec<u32>> = windows(&tokens[b..], el).into_iter().take(en).collect();
        if a <= cfg.train.seq_len || calibration.len() < cn || eval.len() < en {
            return Err(HarnessError::Precondition(format!(
                "token file {} has {} tokens, too few for the configured splits",
                path.display(),
                tokens.len()
            )));
        }
        return Ok(Splits { train: tokens[..a].to_vec(), calibration, eval });
    }
    let lang = PhraseMachine::new(cfg.model.vocab, cfg.phrase_spec(), derive(seed, "data/language"))?;
    Ok(Splits {
        train: lang.stream(cfg.data.train_tokens, derive(seed, "data/train")),
        calibration: lang.sequences(cn, cl, derive(seed, "data/calibration")),
        eval: lang.sequences(en, el, derive(seed, "data/eval")),
    })
}

fn short(hash: &str) -> &str {
    &hash[..16.min(hash.len())]
}

pub fn model_path(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join("cache").join("models").join(format!("{}-seed{seed}.kvlm", short(&cfg.hash())))
}

pub fn bundle_path(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join("cache").join("calibration").join(format!("{}-seed{seed}.kvmb", short(&cfg.hash())))
}

/// Whether an artifact was produced by this call or reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Computed,
    Cached,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Computed => "computed",
            Status::Cached => "cached",
        }
    }
}

/// The replicate's model: the configured weight file, the cached trained
/// model, or a freshly trained one (which is then cached).
pub fn model(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<(Model, PathBuf, Status)> {
    if let Some(file) = &cfg.model.file {
        if !file.exists() {
            return Err(HarnessError::Precondition(format!(
                "model file {} not found; remove [model].file to train from the config, \
                 or run `kvlab calibrate` and point [model].file at a model under <out>/cache/models/",
                file.display()
            )));
        }
        let m = io::load(file)?;
        let want = cfg.model_config(seed);
        let got = *m.config();
        if (got.layers, got.query_heads, got.kv_heads, got.head_dim, got.vocab, got.max_seq, got.mlp_hidden)
            != (want.layers, want.query_heads, want.kv_heads, want.head_dim, want.vocab, want.max_seq, want.mlp_hidden)
        {
            return Err(HarnessError::Config(format!("model file {} does not match the [model] shape", file.display())));
        }
        return Ok((m, file.clone(), Status::Cached));
    }
    let path = model_path(out, cfg, seed);
    if path.exists() {
        if let Ok(m) = io::from_bytes(&read_bytes(&path)?) {
            if m.config() == &cfg.model_config(seed) {
                return Ok((m, path, Status::Cached));
            }
        }
    }
    let s = splits(cfg, seed)?;
    let init = Model::build(cfg.model_config(seed))?;
    let (trained, _) = train_toy(&init, &s.train, &cfg.train_spec(seed))?;
    write_bytes(&path, &io::to_bytes(&trained))?;
    Ok((trained, path, Status::Computed))
}

/// Metric requests needed by every scheme the config can evaluate.
pub fn metric_requests(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(Side, MetricKind)>> {
    let d = cfg.model.head_dim;
    let mut schemes = cfg.sweep_schemes()?;
    schemes.extend(cfg.joint_grid()?);
    schemes.extend(cfg.ablation_schemes(seed)?.into_iter().map(|(_, s)| s));
    schemes.push(ablation_projection(cfg, d)?);
    let mut out = Vec::new();
    for s in &schemes {
        out.extend(required_metrics(s)?);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Rank-reduction scheme at the ablation's bit budget.
pub fn ablation_projection(cfg: &ExperimentConfig, d: usize) -> Result<CompressionScheme> {
    let bits = d * cfg.ablation.bits as usize;
    if !bits.is_multiple_of(16) {
        return Err(HarnessError::Config(format!("ablation budget d·{} is not a whole FP16 rank", cfg.ablation.bits)));
    }
    crate::config::parse_scheme(&format!("v=rank{}", bits / 16))
}

/// The replicate's calibration bundle, reused when its recorded key matches.
pub fn bundle(cfg: &ExperimentConfig, seed: u64, model: &Model, out: &Path) -> Result<(MetricBundle, PathBuf, Status)> {
    let path = bundle_path(out, cfg, seed);
    let key = format!("{}/seed{seed}", cfg.hash());
    if path.exists() {
        if let Ok(b) = MetricBundle::from_bytes(&read_bytes(&path)?) {
            if b.config_hash == key {
                return Ok((b, path, Status::Cached));
            }
        }
    }
    let s = splits(cfg, seed)?;
    let acts = capture_calibration(model, &s.calibration)?;
    let b = build_metrics(model, &acts, &metric_requests(cfg, seed)?, cfg.aggregation()?, &key)?;
    write_bytes(&path, &b.to_bytes())?;
    Ok((b, path, Status::Computed))
}

/// Everything a replicate needs for evaluation.
pub struct Replicate {
    pub seed: u64,
    pub model: Model,
    pub bundle: MetricBundle,
    pub eval: Vec<Vec<u32>>,
    pub files: Vec<PathBuf>,
    pub timings: Vec<(String, f64, Status)>,
}

pub fn replicate(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Replicate> {
    let t = Instant::now();
    let (model, mpath, ms) = model(cfg, seed, out)?;
    let train_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let (bundle, bpath, bs) = bundle(cfg, seed, &model, out)?;
    let cal_s = t.elapsed().as_secs_f64();
    Ok(Replicate {
        seed,
        eval: splits(cfg, seed)?.eval,
        model,
        bundle,
        files: vec![mpath, bpath],
        timings: vec![(format!("seed{seed}/model"), train_s, ms), (format!("seed{seed}/calibration"), cal_s, bs)],
    })
}

/// One (scheme, seed) evaluation, flattened for CSV.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalRow {
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
    /// Per-layer top-1 agreement, `;`-separated.
    pub layer_agreement: String,
}

pub fn family(scheme: &CompressionScheme) -> String {
    let k = scheme.key.paradigm.family();
    let v = scheme.value.paradigm.family();
    match (scheme.key.paradigm.is_identity(), scheme.value.paradigm.is_identity()) {
        (true, true) => "fp".into(),
        (true, false) => v.into(),
        (false, true) => format!("k-{k}"),
        (false, false) => format!("kv-{k}-{v}"),
    }
}

/// Full damage report plus extra gap thresholds, for one scheme.
pub struct Evaluation {
    pub report: DamageReport,
    pub extra_gap_rates: Vec<(f64, f64)>,
    pub row: EvalRow,
}

pub fn evaluate(cfg: &ExperimentConfig, rep: &Replicate, scheme: &CompressionScheme) -> Result<Evaluation> {
    let codecs = resolve_scheme(rep.model.config(), scheme, Some(&rep.bundle))?;
    let report = damage_report(&rep.model, &rep.eval, &codecs, cfg.gap_threshold())?;
    let extra_gap_rates = cfg.eval.gap_thresholds[1.min(cfg.eval.gap_thresholds.len())..]
        .iter()
        .map(|&g| Ok((g, flip_rate(&rep.model, &rep.eval, &codecs, g)?)))
        .collect::<Result<Vec<_>>>()?;
    let b = budget(scheme, cfg.model.head_dim, cfg.eval.seq_len);
    let row = EvalRow {
        scheme: scheme.to_string(),
        family: family(scheme),
        seed: rep.seed,
        data_bits: b.data_bits_per_token_per_head,
        fraction_of_fp16: b.total_fraction_of_fp16,
        ppl: report.ppl,
        ppl_identity: report.ppl_identity,
        ppl_delta: report.ppl_delta_vs_identity,
        attention_kl: report.attention_kl.mean,
        attention_kl_std: report.attention_kl.std,
        flip_rate: report.flip_rate,
        gap_threshold: report.gap_threshold,
        gap_flip_rate: report.gap_conditioned_flip_rate,
        compound_agreement: report.compound_agreement,
        layer_agreement: report.per_layer_top1_agreement.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
    };
    Ok(Evaluation { report, extra_gap_rates, row })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    kvlab_core::linalg::mean_std(x)
}
