//! Deterministic decoder-only toy transformer with an explicit KV cache.
//!
//! Architecture per block: pre-RMS-norm (no gain) attention with learned
//! absolute positions, then an optional pre-norm ReLU MLP. No biases; the
//! unembedding is untied. Weights are kept exactly representable as `f32`
//! while all arithmetic runs in `f64`.

mod cache;
mod config;
pub mod data;
mod forward;
pub mod io;
mod train;
mod weights;

pub use cache::KvCache;
pub use config::ModelConfig;
pub use forward::{ForwardOptions, LayerTrace, Trace, ValueShift};
pub use train::{train_toy, TrainReport, TrainSpec};
pub use weights::{LayerWeights, Weights};

use crate::compressor::{project_via_absorption, CodecTable, Side, SideCodec};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    weights: Weights,
}

impl Model {
    /// Fresh model with weights drawn from `cfg.seed`.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, weights: Weights::init(&cfg) })
    }

    pub fn from_parts(cfg: ModelConfig, weights: Weights) -> Result<Self> {
        cfg.validate()?;
        let expected = Weights::init_shapes(&cfg);
        let got: Vec<_> = weights.named().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if got != expected {
            return Err(Error::dim("weight shapes do not match the configuration"));
        }
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    /// An uncompressed cache for this model.
    pub fn new_cache(&self) -> KvCache {
        KvCache::new(CodecTable::identity(self.cfg.layers, self.cfg.kv_heads), self.cfg.head_dim)
    }

    pub fn cache_for(&self, codecs: &CodecTable) -> Result<KvCache> {
        self.check_codecs(codecs)?;
        Ok(KvCache::new(codecs.clone(), self.cfg.head_dim))
    }

    /// Logits (`tokens.len() × vocab`) for tokens appended after whatever the
    /// cache already holds.
    pub fn forward(&self, tokens: &[u32], cache: &mut KvCache) -> Result<Matrix> {
        forward::forward_impl(self, tokens, cache, &ForwardOptions::default()).map(|(l, _)| l)
    }

    pub fn forward_traced(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        opts: &ForwardOptions,
    ) -> Result<(Matrix, Option<Trace>)> {
        forward::forward_impl(self, tokens, cache, opts)
    }

    fn check_codecs(&self, codecs: &CodecTable) -> Result<()> {
        let c = &self.cfg;
        let shape_ok = |t: &Vec<Vec<SideCodec>>| t.len() == c.layers && t.iter().all(|r| r.len() == c.kv_heads);
        if !shape_ok(&codecs.keys) || !shape_ok(&codecs.values) {
            return Err(Error::dim("codec table layout does not match the model"));
        }
        Ok(())
    }

    /// Copy of the model with every projection frame in `codecs` folded into
    /// the matching key/value weight columns.
    pub fn absorb(&self, codecs: &CodecTable) -> Result<Model> {
        self.check_codecs(codecs)?;
        let hd = self.cfg.head_dim;
        let mut out = self.clone();
        for (l, lw) in out.weights.layers.iter_mut().enumerate() {
            for h in 0..self.cfg.kv_heads {
                for (side, w) in [(Side::Key, &mut lw.wk), (Side::Value, &mut lw.wv)] {
                    if let Some(p) = codecs.codec(side, l, h).absorbed_frame() {
                        let block = project_via_absorption(&w.columns(h * hd, (h + 1) * hd), p)?;
                        for r in 0..w.rows() {
                            w.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(block.row(r));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Bind a codec table: absorbs projection frames and returns a model
    /// whose caches store the compressed representation.
    pub fn compress(&self, codecs: &CodecTable) -> Result<CompressedModel> {
        Ok(CompressedModel { model: self.absorb(codecs)?, codecs: codecs.clone() })
    }
}

/// A model with a codec table bound to it.
#[derive(Debug, Clone)]
pub struct CompressedModel {
    model: Model,
    codecs: CodecTable,
}

impl CompressedModel {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn codecs(&self) -> &CodecTable {
        &self.codecs
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.codecs.clone(), self.model.cfg.head_dim)
    }

    /// Runs one sequence from an empty cache.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        self.model.forward(tokens, &mut self.new_cache())
    }

    pub fn forward_traced(&self, tokens: &[u32], opts: &ForwardOptions) -> Result<(Matrix, Option<Trace>)> {
        self.model.forward_traced(tokens, &mut self.new_cache(), opts)
    }

    /// Summed next-token negative log-likelihood and prediction count over
    /// consecutive `max_seq` windows of `stream`.
    pub fn nll(&self, stream: &[u32]) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for window in stream.chunks(self.model.cfg.max_seq) {
            if window.len() < 2 {
                continue;
            }
            let logits = self.forward(window)?;
            for (t, &next) in window.iter().enumerate().skip(1) {
                let row = logits.row(t - 1);
                total += log_sum_exp(row) - row[next as usize];
                count += 1;
            }
        }
        Ok((total, count))
    }

    pub fn perplexity(&self, stream: &[u32]) -> Result<f64> {
        if stream.len() < 2 {
            return Err(Error::arg("perplexity needs a stream of at least two tokens"));
        }
        let (nll, n) = self.nll(stream)?;
        if n == 0 {
            return Err(Error::arg("stream yields no next-token predictions"));
        }
        Ok((nll / n as f64).exp())
    }
}

/// Perplexity of `model` on `stream` under `codecs`.
pub fn perplexity(model: &Model, stream: &[u32], codecs: &CodecTable) -> Result<f64> {
    model.compress(codecs)?.perplexity(stream)
}

/// Captured activations of one calibration sequence for one KV head.
#[derive(Debug, Clone)]
pub struct Segment {
    pub tokens: Vec<u32>,
    /// Causal attention weights (T × T), one per query head in the group.
    pub alpha_per_query: Vec<Matrix>,
    /// Pre-softmax scores per query head, masked entries zero.
    pub scores_per_query: Vec<Matrix>,
    pub keys: Matrix,
    pub values: Matrix,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Arithmetic mean of the group's attention matrices (still row-stochastic).
    pub fn alpha(&self) -> Matrix {
        let g = self.alpha_per_query.len() as f64;
        let mut a = self.alpha_per_query[0].clone();
        for m in &self.alpha_per_query[1..] {
            a.add_assign(m).expect("same sequence length");
        }
        a.scale_mut(1.0 / g);
        a
    }
}

/// Calibration activations of one (layer, kv_head).
#[derive(Debug, Clone)]
pub struct HeadActivations {
    pub layer: usize,
    pub kv_head: usize,
    pub segments: Vec<Segment>,
}

impl HeadActivations {
    pub fn rows(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn group_size(&self) -> usize {
        self.segments.first().map_or(0, |s| s.alpha_per_query.len())
    }

    /// All value rows, sequences concatenated.
    pub fn values(&self) -> Matrix {
        let blocks: Vec<&Matrix> = self.segments.iter().map(|s| &s.values).collect();
        Matrix::vstack(&blocks).expect("equal head widths")
    }

    pub fn keys(&self) -> Matrix {
        let blocks: Vec<&Matrix> = self.segments.iter().map(|s| &s.keys).collect();
        Matrix::vstack(&blocks).expect("equal head widths")
    }
}

/// Runs each stream through the uncompressed model and records, per
/// (layer, kv_head), the attention weights of every query head in the group
/// along with the cached keys and values. Indexed `[layer][kv_head]`.
pub fn capture_calibration(model: &Model, streams: &[Vec<u32>]) -> Result<Vec<Vec<HeadActivations>>> {
    let cfg = model.config();
    if streams.is_empty() {
        return Err(Error::arg("calibration needs at least one stream"));
    }
    let mut out: Vec<Vec<HeadActivations>> = (0..cfg.layers)
        .map(|layer| (0..cfg.kv_heads).map(|kv_head| HeadActivations { layer, kv_head, segments: vec![] }).collect())
        .collect();
    for stream in streams {
        for window in stream.chunks(cfg.max_seq) {
            let (_, trace) = model.forward_traced(window, &mut model.new_cache(), &ForwardOptions::capture())?;
            let trace = trace.expect("capture requested");
            for (l, lt) in trace.layers.into_iter().enumerate() {
                let g = cfg.group_size();
                let mut alphas = lt.alpha.into_iter();
                let mut scores = lt.scores.into_iter();
                for (j, (keys, values)) in lt.keys.into_iter().zip(lt.values).enumerate() {
                    out[l][j].segments.push(Segment {
                        tokens: window.to_vec(),
                        alpha_per_query: alphas.by_ref().take(g).collect(),
                        scores_per_query: scores.by_ref().take(g).collect(),
                        keys,
                        values,
                    });
                }
            }
        }
    }
    Ok(out)
}
