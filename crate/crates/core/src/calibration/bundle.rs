//! Metric bundle file.
//!
//! ```text
//! magic "KVMB" | version: u32 = 1
//! hash_len: u16 | config hash: utf-8 | aggregation: u8 | count: u32
//! per entry: side u8 (0 key, 1 value) | kind u8 | layer u32 | kv_head u32
//!            sequences u32 | tensor record "metric" (f64, d×d)
//! ```
//!
//! Integers are little-endian; the tensor record layout is shared with the
//! model weight file.

use std::path::Path;

use super::{Aggregation, MetricKind, MetricMatrix, Provenance};
use crate::compressor::Side;
use crate::error::{Error, Result};
use crate::tensor_io::{ByteReader, DType, TensorRecord};

const MAGIC: &[u8; 4] = b"KVMB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricBundle {
    /// Hash of the configuration the metrics were calibrated under.
    pub config_hash: String,
    pub aggregation: Aggregation,
    pub metrics: Vec<MetricMatrix>,
}

fn side_code(s: Option<Side>) -> u8 {
    match s {
        Some(Side::Key) => 0,
        _ => 1,
    }
}

fn agg_code(a: Aggregation) -> u8 {
    match a {
        Aggregation::AlphaMean => 0,
        Aggregation::Arithmetic => 1,
        Aggregation::Geometric => 2,
        Aggregation::Harmonic => 3,
    }
}

impl MetricBundle {
    pub fn get(&self, side: Side, kind: MetricKind, layer: usize, kv_head: usize) -> Option<&MetricMatrix> {
        self.metrics.iter().find(|m| {
            m.kind == kind
                && m.provenance.layer == layer
                && m.provenance.kv_head == kv_head
                && m.provenance.side.unwrap_or(Side::Value) == side
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u16).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.push(agg_code(self.aggregation));
        out.extend_from_slice(&(self.metrics.len() as u32).to_le_bytes());
        for m in &self.metrics {
            let p = &m.provenance;
            out.push(side_code(p.side));
            out.push(m.kind.code());
            for v in [p.layer, p.kv_head, p.sequences] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            TensorRecord::matrix("metric", DType::F64, &m.m).write(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a metric bundle (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let n = r.u16()? as usize;
        let config_hash =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("config hash is not utf-8".into()))?;
        let aggregation = match r.u8()? {
            0 => Aggregation::AlphaMean,
            1 => Aggregation::Arithmetic,
            2 => Aggregation::Geometric,
            3 => Aggregation::Harmonic,
            c => return Err(Error::Format(format!("unknown aggregation code {c}"))),
        };
        let count = r.u32()? as usize;
        let mut metrics = Vec::with_capacity(count);
        for _ in 0..count {
            let side = match r.u8()? {
                0 => Side::Key,
                1 => Side::Value,
                c => return Err(Error::Format(format!("unknown side code {c}"))),
            };
            let kind = MetricKind::from_code(r.u8()?)?;
            let layer = r.u32()? as usize;
            let kv_head = r.u32()? as usize;
            let sequences = r.u32()? as usize;
            let m = TensorRecord::read(&mut r)?.into_matrix()?;
            if !m.is_square() {
                return Err(Error::Format("metric is not square".into()));
            }
            let provenance = Provenance { layer, kv_head, query_head: None, side: Some(side), sequences };
            metrics.push(MetricMatrix { kind, m, provenance });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in metric bundle".into()));
        }
        Ok(Self { config_hash, aggregation, metrics })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
