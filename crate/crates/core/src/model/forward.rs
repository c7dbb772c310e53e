use super::cache::KvCache;
use super::Model;
use crate::compressor::Side;
use crate::error::{Error, Result};
use crate::linalg::{softmax_in_place, Matrix};

pub(crate) const RMS_EPS: f64 = 1e-5;

/// Additive shift applied to every cached value row of one (layer, kv_head)
/// as it is read, leaving storage untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueShift {
    pub layer: usize,
    pub kv_head: usize,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Record per-layer attention internals.
    pub capture: bool,
    pub value_shift: Option<ValueShift>,
}

impl ForwardOptions {
    pub fn capture() -> Self {
        Self { capture: true, value_shift: None }
    }
}

/// Attention internals of one layer for the tokens processed in one call.
///
/// Row `i` of the per-query-head matrices belongs to absolute position
/// `offset + i` and only its first `offset + i + 1` columns are causal; the
/// remaining entries are zero.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Pre-softmax scores `q·k/√d`, per query head (n × total).
    pub scores: Vec<Matrix>,
    /// Attention weights, per query head (n × total).
    pub alpha: Vec<Matrix>,
    /// `α·V` per query head (n × d), before the output projection.
    pub head_out: Vec<Matrix>,
    /// Keys as read back from the cache, per KV head (total × d).
    pub keys: Vec<Matrix>,
    /// Values as read back from the cache (after any shift), per KV head.
    pub values: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub offset: usize,
    pub layers: Vec<LayerTrace>,
}

pub(crate) fn rms_norm(x: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= s);
        inv.push(s);
    }
    (out, inv)
}

/// Causal attention of `q` (n × d) over `k`, `v` (total × d) where query row
/// `i` sits at absolute position `offset + i`. Returns (scores, alpha, out).
pub(crate) fn attend(q: &Matrix, k: &Matrix, v: &Matrix, offset: usize) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_t(k).expect("head widths agree");
    scores.scale_mut(scale);
    let mut alpha = scores.clone();
    for i in 0..q.rows() {
        let visible = offset + i + 1;
        let row = alpha.row_mut(i);
        softmax_in_place(&mut row[..visible]);
        row[visible..].iter_mut().for_each(|x| *x = 0.0);
        scores.row_mut(i)[visible..].iter_mut().for_each(|x| *x = 0.0);
    }
    let out = alpha.matmul(v).expect("alpha width equals cache length");
    (scores, alpha, out)
}

pub(crate) fn copy_columns(dst: &mut Matrix, src: &Matrix, start: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + src.cols()].copy_from_slice(src.row(r));
    }
}

pub(crate) fn forward_impl(
    model: &Model,
    tokens: &[u32],
    cache: &mut KvCache,
    opts: &ForwardOptions,
) -> Result<(Matrix, Option<Trace>)> {
    let cfg = model.config();
    let w = model.weights();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::arg(format!("token {t} outside vocabulary of {}", cfg.vocab)));
    }
    if cache.layers() != cfg.layers || cache.kv_heads() != cfg.kv_heads {
        return Err(Error::dim("cache layout does not match the model"));
    }
    let offset = cache.len();
    let n = tokens.len();
    if offset + n > cfg.max_seq {
        return Err(Error::arg(format!("sequence of {} exceeds max_seq {}", offset + n, cfg.max_seq)));
    }
    if let Some(s) = &opts.value_shift {
        if s.layer >= cfg.layers || s.kv_head >= cfg.kv_heads || s.delta.len() != cfg.head_dim {
            return Err(Error::arg("value shift does not address a cache head"));
        }
    }
    let hd = cfg.head_dim;
    let dm = cfg.model_dim();
    let mut x = Matrix::zeros(n, dm);
    for (i, &t) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        let te = w.tok_emb.row(t as usize);
        let pe = w.pos_emb.row(offset + i);
        for c in 0..dm {
            row[c] = te[c] + pe[c];
        }
    }

    let mut layers = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let (h, _) = rms_norm(&x);
        let q = h.matmul(&lw.wq)?;
        let k = h.matmul(&lw.wk)?;
        let v = h.matmul(&lw.wv)?;
        for j in 0..cfg.kv_heads {
            cache.write(l, j, &k.columns(j * hd, (j + 1) * hd), &v.columns(j * hd, (j + 1) * hd))?;
        }
        let mut att = Matrix::zeros(n, cfg.query_heads * hd);
        let mut lt = LayerTrace { scores: vec![], alpha: vec![], head_out: vec![], keys: vec![], values: vec![] };
        for j in 0..cfg.kv_heads {
            let keys = cache.read(l, j, Side::Key, n);
            let mut values = cache.read(l, j, Side::Value, n);
            if let Some(s) = opts.value_shift.as_ref().filter(|s| s.layer == l && s.kv_head == j) {
                for r in 0..values.rows() {
                    values.row_mut(r).iter_mut().zip(&s.delta).for_each(|(a, b)| *a += b);
                }
            }
            for i in cfg.query_heads_of(j) {
                let qi = q.columns(i * hd, (i + 1) * hd);
                let (scores, alpha, out) = attend(&qi, &keys, &values, offset);
                copy_columns(&mut att, &out, i * hd);
                if opts.capture {
                    lt.scores.push(scores);
                    lt.alpha.push(alpha);
                    lt.head_out.push(out);
                }
            }
            if opts.capture {
                lt.keys.push(keys);
                lt.values.push(values);
            }
        }
        x.add_assign(&att.matmul(&lw.wo)?)?;
        if cfg.mlp_hidden > 0 {
            let (h2, _) = rms_norm(&x);
            let a = h2.matmul(&lw.w1)?.map(|v| v.max(0.0));
            x.add_assign(&a.matmul(&lw.w2)?)?;
        }
        if opts.capture {
            layers.push(lt);
        }
    }
    cache.advance(n);
    let (hf, _) = rms_norm(&x);
    let logits = hf.matmul(&w.unembed)?;
    let trace = opts.capture.then_some(Trace { offset, layers });
    Ok((logits, trace))
}
