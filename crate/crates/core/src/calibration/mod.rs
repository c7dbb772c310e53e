//! Metric matrices of the rank-reduction objectives and the bases they
//! define: PCA, the attention-weighted theorem metric, output-weighted
//! KQ-SVD and entropy weighting, with GQA aggregation.

mod aggregate;
mod bundle;
mod metric;

pub use aggregate::{aggregate_gqa, Aggregation, EIGEN_FLOOR};
pub use bundle::MetricBundle;
pub use metric::{
    kqsvd_from_pca, metric_entropy, metric_key_pca, metric_kqsvd, metric_pca, metric_theorem, metrics_per_query_head,
    output_slice, MetricAccumulator, MetricKind, MetricMatrix, Provenance, PSD_TOL,
};

use rayon::prelude::*;

use crate::compressor::{Basis, CodecTable, CompressionScheme, Paradigm, Side, SideCodec};
use crate::error::{Error, Result};
use crate::linalg::{eigh_symmetric, random_orthonormal_with, Matrix};
use crate::model::{HeadActivations, Model, ModelConfig};

/// Default number of calibration sequences.
pub const DEFAULT_CALIBRATION_SEQUENCES: usize = 32;

/// Top-`r` eigenvectors of `m` (descending eigenvalue, deterministic ties).
pub fn basis_from_metric(m: &MetricMatrix, r: usize) -> Result<Matrix> {
    if r == 0 || r > m.dim() {
        return Err(Error::arg(format!("rank {r} outside 1..={}", m.dim())));
    }
    Ok(eigh_symmetric(&m.m)?.top(r))
}

/// The `r` coordinate axes with the largest diagonal entries of `m`
/// (ties broken by lower index), as a `d×r` frame.
pub fn axes_by_variance(m: &MetricMatrix, r: usize) -> Result<Matrix> {
    let d = m.dim();
    if r == 0 || r > d {
        return Err(Error::arg(format!("rank {r} outside 1..={d}")));
    }
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| m.m[(b, b)].total_cmp(&m.m[(a, a)]).then(a.cmp(&b)));
    let mut p = Matrix::zeros(d, r);
    for (c, &i) in idx.iter().take(r).enumerate() {
        p[(i, c)] = 1.0;
    }
    Ok(p)
}

/// Metric kind a (side, basis) pair reads from calibration, if any.
pub fn metric_for(side: Side, paradigm: Paradigm, basis: Basis) -> Result<Option<MetricKind>> {
    let kind = match (basis, paradigm) {
        (_, Paradigm::Identity) | (Basis::Random(_), _) => return Ok(None),
        (Basis::Original, Paradigm::Quantize { .. }) => return Ok(None),
        (Basis::Original | Basis::Pca, _) => MetricKind::Pca,
        (Basis::Theorem, _) => MetricKind::Theorem,
        (Basis::KqSvd, _) => MetricKind::KqSvd,
        (Basis::Entropy, _) => MetricKind::Entropy,
    };
    if side == Side::Key && kind != MetricKind::Pca {
        return Err(Error::Config(format!("the {kind} basis is defined for values only; keys use pca")));
    }
    Ok(Some(kind))
}

/// Every (side, metric kind) a scheme needs.
pub fn required_metrics(scheme: &CompressionScheme) -> Result<Vec<(Side, MetricKind)>> {
    let mut out = Vec::new();
    for side in [Side::Key, Side::Value] {
        let s = scheme.side(side);
        if let Some(k) = metric_for(side, s.paradigm, s.basis)? {
            out.push((side, k));
        }
    }
    Ok(out)
}

fn head_metric(
    model: &Model,
    acts: &HeadActivations,
    side: Side,
    kind: MetricKind,
    aggregation: Aggregation,
) -> Result<MetricMatrix> {
    match (side, kind) {
        (Side::Key, MetricKind::Pca) => metric_key_pca(acts),
        (Side::Key, _) => Err(Error::Config(format!("no key-side {kind} metric"))),
        (Side::Value, MetricKind::Pca) => metric_pca(acts),
        (Side::Value, MetricKind::KqSvd) => metric_kqsvd(acts, &output_slice(model, acts.layer, acts.kv_head)),
        (Side::Value, MetricKind::Theorem | MetricKind::Entropy) => match aggregation {
            Aggregation::AlphaMean if kind == MetricKind::Theorem => metric_theorem(acts),
            Aggregation::AlphaMean => metric_entropy(acts),
            mode => aggregate_gqa(&metrics_per_query_head(acts, kind)?, mode),
        },
    }
}

/// Builds every requested metric for every (layer, kv_head) of `acts`
/// (indexed `[layer][kv_head]`, as returned by
/// [`crate::model::capture_calibration`]). Heads are processed in parallel;
/// the result is ordered and independent of the thread count.
pub fn build_metrics(
    model: &Model,
    acts: &[Vec<HeadActivations>],
    requests: &[(Side, MetricKind)],
    aggregation: Aggregation,
    config_hash: &str,
) -> Result<MetricBundle> {
    let mut requests = requests.to_vec();
    requests.sort();
    requests.dedup();
    let jobs: Vec<(&HeadActivations, Side, MetricKind)> = requests
        .iter()
        .flat_map(|&(side, kind)| acts.iter().flatten().map(move |a| (a, side, kind)))
        .collect();
    let metrics = jobs
        .into_par_iter()
        .map(|(a, side, kind)| head_metric(model, a, side, kind, aggregation))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricBundle { config_hash: config_hash.to_string(), aggregation, metrics })
}

fn side_codec(
    cfg: &ModelConfig,
    scheme: &CompressionScheme,
    side: Side,
    layer: usize,
    head: usize,
    bundle: Option<&MetricBundle>,
) -> Result<SideCodec> {
    let s = scheme.side(side);
    if s.paradigm.is_identity() || !scheme.applies_to(layer) {
        return Ok(SideCodec::Identity);
    }
    let d = cfg.head_dim;
    let width = s.paradigm.rank().unwrap_or(d);
    let frame = match (s.basis, metric_for(side, s.paradigm, s.basis)?) {
        (Basis::Random(seed), _) => {
            let label = format!("basis/{side}/{layer}/{head}");
            let mut rng = crate::seed::rng(seed, &label);
            Some(random_orthonormal_with(d, width, &mut rng)?)
        }
        (_, None) => None,
        (basis, Some(kind)) => {
            let bundle = bundle.ok_or_else(|| Error::Config(format!("scheme `{scheme}` needs calibration metrics")))?;
            let m = bundle.get(side, kind, layer, head).ok_or_else(|| {
                Error::Config(format!("calibration bundle lacks the {side} {kind} metric for layer {layer} head {head}"))
            })?;
            Some(if basis == Basis::Original { axes_by_variance(m, width)? } else { basis_from_metric(m, width)? })
        }
    };
    Ok(match s.paradigm {
        Paradigm::Identity => SideCodec::Identity,
        Paradigm::Quantize { bits } => SideCodec::Quantize { bits, rotation: frame },
        Paradigm::Project { .. } => SideCodec::Project { basis: frame.expect("projections always have a frame") },
        Paradigm::Hybrid { bits, .. } => SideCodec::Hybrid { basis: frame.expect("hybrids always have a frame"), bits },
    })
}

/// Resolves a declarative scheme into per-(layer, kv_head) codecs, reading
/// bases from `bundle` where the scheme needs them.
pub fn resolve_scheme(cfg: &ModelConfig, scheme: &CompressionScheme, bundle: Option<&MetricBundle>) -> Result<CodecTable> {
    scheme.validate(cfg.head_dim, cfg.layers)?;
    let table = |side| {
        (0..cfg.layers)
            .map(|l| (0..cfg.kv_heads).map(|h| side_codec(cfg, scheme, side, l, h, bundle)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()
    };
    Ok(CodecTable { scheme: scheme.clone(), keys: table(Side::Key)?, values: table(Side::Value)? })
}
