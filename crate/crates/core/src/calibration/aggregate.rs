use std::fmt;
use std::str::FromStr;

use super::metric::{MetricMatrix, PSD_TOL};
use crate::error::{Error, Result};
use crate::linalg::{eigh_symmetric, EigenDecomposition, Matrix};

/// Eigenvalues are floored at this fraction of the largest before taking
/// logarithms, inverses or inverse square roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// How the query heads of a GQA group are combined into one metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Aggregation {
    /// Average the attention matrices first, then build one metric.
    #[default]
    AlphaMean,
    Arithmetic,
    Geometric,
    Harmonic,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::AlphaMean => "alpha-mean",
            Aggregation::Arithmetic => "arithmetic",
            Aggregation::Geometric => "geometric",
            Aggregation::Harmonic => "harmonic",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "alpha-mean" => Aggregation::AlphaMean,
            "arithmetic" => Aggregation::Arithmetic,
            "geometric" => Aggregation::Geometric,
            "harmonic" => Aggregation::Harmonic,
            _ => return Err(Error::Config(format!("unknown aggregation `{s}`"))),
        })
    }
}

fn floored(e: &EigenDecomposition) -> impl Fn(f64) -> f64 {
    let floor = EIGEN_FLOOR * e.max_abs_eigenvalue().max(f64::MIN_POSITIVE);
    move |l| l.max(floor)
}

fn psd_decomposition(m: &MetricMatrix) -> Result<EigenDecomposition> {
    let e = eigh_symmetric(&m.m)?;
    if e.min_eigenvalue() < -PSD_TOL * e.max_abs_eigenvalue() {
        return Err(Error::NotPsd(format!(
            "{} metric at {} has eigenvalue {:e}",
            m.kind,
            m.provenance,
            e.min_eigenvalue()
        )));
    }
    Ok(e)
}

/// Two-matrix geometric mean `A # B = A^{1/2} (A^{-1/2} B A^{-1/2})^{1/2} A^{1/2}`.
fn geometric_pair(a: &EigenDecomposition, b: &Matrix) -> Result<Matrix> {
    let f = floored(a);
    let root = a.map_spectrum(|l| f(l).sqrt());
    let inv_root = a.map_spectrum(|l| 1.0 / f(l).sqrt());
    let mut inner = inv_root.matmul(b)?.matmul(&inv_root)?;
    inner.symmetrize();
    let ie = eigh_symmetric(&inner)?;
    let g = floored(&ie);
    let mid = ie.map_spectrum(|l| g(l).sqrt());
    root.matmul(&mid)?.matmul(&root)
}

/// Combines the per-query-head metrics of one GQA group.
///
/// `Arithmetic` is the elementwise mean. `Geometric` is the matrix geometric
/// mean for two inputs and `exp(mean log Mᵢ)` for more (exact only when the
/// inputs commute). `Harmonic` is `(mean Mᵢ⁻¹)⁻¹`. Geometric and harmonic
/// floor eigenvalues at [`EIGEN_FLOOR`] times the largest and reject
/// indefinite inputs. `AlphaMean` cannot be applied after the fact and is
/// treated as arithmetic.
pub fn aggregate_gqa(metrics: &[MetricMatrix], mode: Aggregation) -> Result<MetricMatrix> {
    let first = metrics.first().ok_or_else(|| Error::arg("no metrics to aggregate"))?;
    if metrics.iter().any(|m| m.m.shape() != first.m.shape()) {
        return Err(Error::dim("aggregated metrics differ in shape"));
    }
    let n = metrics.len() as f64;
    let d = first.dim();
    let mut m = match mode {
        Aggregation::AlphaMean | Aggregation::Arithmetic => {
            let mut s = Matrix::zeros(d, d);
            for x in metrics {
                s.add_assign(&x.m)?;
            }
            s.scale(1.0 / n)
        }
        Aggregation::Geometric => {
            let decs = metrics.iter().map(psd_decomposition).collect::<Result<Vec<_>>>()?;
            if decs.len() == 1 {
                first.m.clone()
            } else if decs.len() == 2 {
                geometric_pair(&decs[0], &metrics[1].m)?
            } else {
                let mut s = Matrix::zeros(d, d);
                for e in &decs {
                    let f = floored(e);
                    s.add_assign(&e.map_spectrum(|l| f(l).ln()))?;
                }
                eigh_symmetric(&s.scale(1.0 / n))?.map_spectrum(f64::exp)
            }
        }
        Aggregation::Harmonic => {
            let decs = metrics.iter().map(psd_decomposition).collect::<Result<Vec<_>>>()?;
            let mut s = Matrix::zeros(d, d);
            for e in &decs {
                let f = floored(e);
                s.add_assign(&e.map_spectrum(|l| 1.0 / f(l)))?;
            }
            let mean = eigh_symmetric(&s.scale(1.0 / n))?;
            mean.map_spectrum(|l| 1.0 / l)
        }
    };
    m.symmetrize();
    let mut provenance = first.provenance.clone();
    provenance.query_head = None;
    Ok(MetricMatrix { kind: first.kind, m, provenance })
}
