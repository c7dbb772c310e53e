//! KV cache whose storage follows the bound compression scheme.
//!
//! Identity sides keep `f32` rows. Projected sides keep the `r` coordinates
//! in their frame. Quantized and hybrid sides keep integer codes with
//! per-channel scales fixed by the first write to the cache (one set of
//! scales per sequence); later appends reuse those scales and saturate at the
//! grid edge.

use crate::compressor::{channel_scales, quantize_with_scales, CodecTable, QuantizedBlock, Side, SideCodec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone)]
enum SideStore {
    Dense { rows: Vec<f32>, dim: usize },
    Coords { rows: Vec<f32>, basis: Matrix },
    Quantized { block: Option<QuantizedBlock>, transform: Option<Matrix>, bits: u8, dim: usize },
}

impl SideStore {
    fn new(codec: &SideCodec, dim: usize) -> Self {
        match codec {
            SideCodec::Identity => SideStore::Dense { rows: Vec::new(), dim },
            SideCodec::Project { basis } => SideStore::Coords { rows: Vec::new(), basis: basis.clone() },
            SideCodec::Quantize { bits, rotation } => {
                SideStore::Quantized { block: None, transform: rotation.clone(), bits: *bits, dim }
            }
            SideCodec::Hybrid { basis, bits } => {
                SideStore::Quantized { block: None, transform: Some(basis.clone()), bits: *bits, dim }
            }
        }
    }

    fn write(&mut self, x: &Matrix) -> Result<()> {
        match self {
            SideStore::Dense { rows, .. } => rows.extend(x.as_slice().iter().map(|&v| v as f32)),
            SideStore::Coords { rows, basis } => {
                let c = x.matmul(basis)?;
                rows.extend(c.as_slice().iter().map(|&v| v as f32));
            }
            SideStore::Quantized { block, transform, bits, .. } => {
                let y = match transform {
                    Some(t) => x.matmul(t)?,
                    None => x.clone(),
                };
                match block {
                    Some(b) => b.append(&y)?,
                    None => {
                        let scales = channel_scales(&y, *bits);
                        *block = Some(quantize_with_scales(&y, *bits, scales)?);
                    }
                }
            }
        }
        Ok(())
    }

    fn read(&self, len: usize) -> Matrix {
        match self {
            SideStore::Dense { rows, dim } => {
                Matrix::from_vec(len, *dim, rows.iter().map(|&v| f64::from(v)).collect()).expect("dense rows")
            }
            SideStore::Coords { rows, basis } => {
                let c = Matrix::from_vec(len, basis.cols(), rows.iter().map(|&v| f64::from(v)).collect())
                    .expect("coordinate rows");
                c.matmul_t(basis).expect("frame width")
            }
            SideStore::Quantized { block, transform, dim, .. } => match block {
                None => Matrix::zeros(0, *dim),
                Some(b) => {
                    let y = b.dequantize();
                    match transform {
                        Some(t) => y.matmul_t(t).expect("frame width"),
                        None => y,
                    }
                }
            },
        }
    }

    fn quantized(&self) -> Option<&QuantizedBlock> {
        match self {
            SideStore::Quantized { block, .. } => block.as_ref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    keys: SideStore,
    values: SideStore,
}

/// Per-(layer, kv_head) key/value storage for one sequence.
#[derive(Debug, Clone)]
pub struct KvCache {
    codecs: CodecTable,
    heads: Vec<Vec<HeadCache>>,
    len: usize,
    head_dim: usize,
}

impl KvCache {
    pub fn new(codecs: CodecTable, head_dim: usize) -> Self {
        let heads = codecs
            .keys
            .iter()
            .zip(&codecs.values)
            .map(|(ks, vs)| {
                ks.iter()
                    .zip(vs)
                    .map(|(k, v)| HeadCache { keys: SideStore::new(k, head_dim), values: SideStore::new(v, head_dim) })
                    .collect()
            })
            .collect();
        Self { codecs, heads, len: 0, head_dim }
    }

    pub fn codecs(&self) -> &CodecTable {
        &self.codecs
    }

    /// Tokens stored so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layers(&self) -> usize {
        self.heads.len()
    }

    pub fn kv_heads(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    /// Stores `n` new key and value rows for one head. All heads of all layers
    /// must be written before [`KvCache::advance`] is called.
    pub(crate) fn write(&mut self, layer: usize, head: usize, keys: &Matrix, values: &Matrix) -> Result<()> {
        if keys.cols() != self.head_dim || values.cols() != self.head_dim {
            return Err(Error::dim("cache write: row width differs from head_dim"));
        }
        let h = &mut self.heads[layer][head];
        h.keys.write(keys)?;
        h.values.write(values)
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.len += n;
    }

    /// Reconstructed rows stored for (layer, head, side), including rows
    /// written during the current step (`pending` of them).
    pub fn read(&self, layer: usize, head: usize, side: Side, pending: usize) -> Matrix {
        let h = &self.heads[layer][head];
        let n = self.len + pending;
        match side {
            Side::Key => h.keys.read(n),
            Side::Value => h.values.read(n),
        }
    }

    /// The quantized block backing (layer, head, side), if that side is quantized.
    pub fn quantized_block(&self, layer: usize, head: usize, side: Side) -> Option<&QuantizedBlock> {
        let h = &self.heads[layer][head];
        match side {
            Side::Key => h.keys.quantized(),
            Side::Value => h.values.quantized(),
        }
    }
}
