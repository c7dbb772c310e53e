use std::fmt;
use std::str::FromStr;

use crate::compressor::Side;
use crate::error::{Error, Result};
use crate::linalg::{eigh_symmetric, entropy, Matrix};
use crate::model::HeadActivations;

/// Eigenvalues below `-PSD_TOL · max|λ|` make a metric indefinite.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    /// `VᵀV` (or `KᵀK` on the key side).
    Pca,
    /// `Vᵀ αᵀ α V`
    Theorem,
    /// Output-weighted PCA through `W_o`.
    KqSvd,
    /// `Vᵀ αᵀ D α V` with `D = diag(exp(−H(α_t)))`.
    Entropy,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::Pca, MetricKind::Theorem, MetricKind::KqSvd, MetricKind::Entropy];

    pub fn code(self) -> u8 {
        match self {
            MetricKind::Pca => 0,
            MetricKind::Theorem => 1,
            MetricKind::KqSvd => 2,
            MetricKind::Entropy => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Self::ALL.get(c as usize).copied().ok_or_else(|| Error::Format(format!("unknown metric kind {c}")))
    }

    /// Whether the metric is guaranteed positive semidefinite.
    pub fn expects_psd(self) -> bool {
        self != MetricKind::KqSvd
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Pca => "pca",
            MetricKind::Theorem => "theorem",
            MetricKind::KqSvd => "kqsvd",
            MetricKind::Entropy => "entropy",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub layer: usize,
    pub kv_head: usize,
    /// Set for per-query-head metrics before GQA aggregation.
    pub query_head: Option<usize>,
    pub side: Option<Side>,
    /// Number of calibration sequences accumulated.
    pub sequences: usize,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} kv_head {}", self.layer, self.kv_head)?;
        if let Some(q) = self.query_head {
            write!(f, " query_head {q}")?;
        }
        Ok(())
    }
}

/// A symmetric `d×d` metric whose leading eigenvectors define a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    pub kind: MetricKind,
    pub m: Matrix,
    pub provenance: Provenance,
}

impl MetricMatrix {
    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    /// Smallest eigenvalue relative to the largest magnitude (0 for a zero metric).
    pub fn min_relative_eigenvalue(&self) -> Result<f64> {
        let e = eigh_symmetric(&self.m)?;
        let s = e.max_abs_eigenvalue();
        Ok(if s == 0.0 { 0.0 } else { e.min_eigenvalue() / s })
    }

    pub fn is_psd(&self) -> Result<bool> {
        Ok(self.min_relative_eigenvalue()? >= -PSD_TOL)
    }

    /// Multiplies the metric by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { m: self.m.scale(c), ..self.clone() }
    }
}

/// Streaming sum of per-sequence metric contributions, normalized by the
/// number of rows seen when finalized.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    kind: MetricKind,
    sum: Matrix,
    rows: usize,
    sequences: usize,
}

fn check_alpha(alpha: &Matrix, v: &Matrix) -> Result<()> {
    if alpha.cols() != v.rows() {
        return Err(Error::dim(format!(
            "attention has {} columns but there are {} value rows",
            alpha.cols(),
            v.rows()
        )));
    }
    Ok(())
}

impl MetricAccumulator {
    pub fn new(kind: MetricKind, d: usize) -> Self {
        Self { kind, sum: Matrix::zeros(d, d), rows: 0, sequences: 0 }
    }

    fn add_gram(&mut self, x: &Matrix, rows: usize) -> Result<()> {
        if x.cols() != self.sum.rows() {
            return Err(Error::dim(format!("rows of width {} for a {}-dim metric", x.cols(), self.sum.rows())));
        }
        self.sum.add_assign(&x.gram())?;
        self.rows += rows;
        self.sequences += 1;
        Ok(())
    }

    /// Adds `xᵀx` over the rows of `x`.
    pub fn add_rows(&mut self, x: &Matrix) -> Result<()> {
        self.add_gram(x, x.rows())
    }

    /// Adds `(αV)ᵀ(αV)`, one term per query row of `alpha`.
    pub fn add_attended(&mut self, alpha: &Matrix, v: &Matrix) -> Result<()> {
        check_alpha(alpha, v)?;
        self.add_gram(&alpha.matmul(v)?, alpha.rows())
    }

    /// Adds `(αV)ᵀ D (αV)` with `D_tt = exp(−H(α_t))`.
    pub fn add_entropy_weighted(&mut self, alpha: &Matrix, v: &Matrix) -> Result<()> {
        check_alpha(alpha, v)?;
        let mut av = alpha.matmul(v)?;
        for t in 0..alpha.rows() {
            let w = (-entropy(alpha.row(t))).exp().sqrt();
            av.row_mut(t).iter_mut().for_each(|x| *x *= w);
        }
        self.add_gram(&av, alpha.rows())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finalize(self, mut provenance: Provenance) -> Result<MetricMatrix> {
        if self.rows == 0 {
            return Err(Error::arg(format!("no calibration rows for the {} metric at {provenance}", self.kind)));
        }
        let mut m = self.sum.scale(1.0 / self.rows as f64);
        m.symmetrize();
        provenance.sequences = self.sequences;
        Ok(MetricMatrix { kind: self.kind, m, provenance })
    }
}

fn provenance(acts: &HeadActivations, side: Side) -> Provenance {
    Provenance { layer: acts.layer, kv_head: acts.kv_head, query_head: None, side: Some(side), sequences: 0 }
}

fn head_dim(acts: &HeadActivations) -> Result<usize> {
    acts.segments
        .first()
        .map(|s| s.values.cols())
        .ok_or_else(|| Error::arg(format!("empty activations for layer {} kv_head {}", acts.layer, acts.kv_head)))
}

/// `VᵀV / T` over every captured value row.
pub fn metric_pca(acts: &HeadActivations) -> Result<MetricMatrix> {
    let mut acc = MetricAccumulator::new(MetricKind::Pca, head_dim(acts)?);
    for s in &acts.segments {
        acc.add_rows(&s.values)?;
    }
    acc.finalize(provenance(acts, Side::Value))
}

/// `KᵀK / T`, the key-side PCA metric.
pub fn metric_key_pca(acts: &HeadActivations) -> Result<MetricMatrix> {
    let mut acc = MetricAccumulator::new(MetricKind::Pca, head_dim(acts)?);
    for s in &acts.segments {
        acc.add_rows(&s.keys)?;
    }
    acc.finalize(provenance(acts, Side::Key))
}

/// `Σ Vᵀ αᵀ α V / #queries` with `α` averaged over the query heads sharing
/// the KV head.
pub fn metric_theorem(acts: &HeadActivations) -> Result<MetricMatrix> {
    let mut acc = MetricAccumulator::new(MetricKind::Theorem, head_dim(acts)?);
    for s in &acts.segments {
        acc.add_attended(&s.alpha(), &s.values)?;
    }
    acc.finalize(provenance(acts, Side::Value))
}

/// Entropy-weighted theorem metric with group-averaged `α`.
pub fn metric_entropy(acts: &HeadActivations) -> Result<MetricMatrix> {
    let mut acc = MetricAccumulator::new(MetricKind::Entropy, head_dim(acts)?);
    for s in &acts.segments {
        acc.add_entropy_weighted(&s.alpha(), &s.values)?;
    }
    acc.finalize(provenance(acts, Side::Value))
}

/// One theorem (or entropy) metric per query head of the group, for
/// [`super::aggregate_gqa`].
pub fn metrics_per_query_head(acts: &HeadActivations, kind: MetricKind) -> Result<Vec<MetricMatrix>> {
    let d = head_dim(acts)?;
    (0..acts.group_size())
        .map(|q| {
            let mut acc = MetricAccumulator::new(kind, d);
            for s in &acts.segments {
                let a = &s.alpha_per_query[q];
                match kind {
                    MetricKind::Theorem => acc.add_attended(a, &s.values)?,
                    MetricKind::Entropy => acc.add_entropy_weighted(a, &s.values)?,
                    _ => return Err(Error::arg(format!("{kind} metric does not depend on attention"))),
                }
            }
            let mut p = provenance(acts, Side::Value);
            p.query_head = Some(q);
            acc.finalize(p)
        })
        .collect()
}

/// Output-weighted PCA: with `C = VᵀV/T` and `B = W_o W_oᵀ`, returns
/// `B^{1/2} C B^{1/2}`, whose spectrum is that of the PCA metric of `V W_o`.
///
/// `w_o` is the `d × model_dim` slice of the output projection read by this
/// head; for a GQA group pass the slices of every query head stacked
/// side by side (`d × g·model_dim`).
pub fn metric_kqsvd(acts: &HeadActivations, w_o: &Matrix) -> Result<MetricMatrix> {
    let pca = metric_pca(acts)?;
    kqsvd_from_pca(&pca, w_o)
}

pub fn kqsvd_from_pca(pca: &MetricMatrix, w_o: &Matrix) -> Result<MetricMatrix> {
    let d = pca.dim();
    if w_o.rows() != d {
        return Err(Error::dim(format!("W_o has {} rows, head dimension is {d}", w_o.rows())));
    }
    let b = w_o.gram_rows();
    let root = eigh_symmetric(&b)?.map_spectrum(|l| l.max(0.0).sqrt());
    let mut m = root.matmul(&pca.m)?.matmul(&root)?;
    m.symmetrize();
    Ok(MetricMatrix { kind: MetricKind::KqSvd, m, provenance: pca.provenance.clone() })
}

/// The `d × (g·model_dim)` output-projection slice read through KV head
/// `kv_head` of `layer`.
pub fn output_slice(model: &crate::model::Model, layer: usize, kv_head: usize) -> Matrix {
    let cfg = model.config();
    let hd = cfg.head_dim;
    let wo = &model.weights().layers[layer].wo;
    let group: Vec<Matrix> = cfg.query_heads_of(kv_head).map(|q| wo.row_range(q * hd, (q + 1) * hd)).collect();
    let dm = wo.cols();
    Matrix::from_fn(hd, dm * group.len(), |r, c| group[c / dm][(r, c % dm)])
}
