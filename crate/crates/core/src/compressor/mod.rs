//! Compression operators: per-channel symmetric quantization, rank-r
//! projection by weight absorption, basis rotation, hybrid composition and
//! exact bit-budget accounting.

mod budget;
mod project;
mod quant;
mod scheme;

pub use budget::{budget, BudgetLedger, FP16_BITS, SCALE_BITS};
pub use project::{check_frame, project_via_absorption};
pub use quant::{
    channel_scales, orthonormality_error, qmax, quantize, quantize_with_scales, rotate_quantize, QuantizedBlock,
    RotatedBlock,
};
pub use scheme::{Basis, CompressionScheme, Paradigm, Side, SideScheme, Target};

use crate::linalg::Matrix;

/// A side's compression resolved against concrete bases for one
/// (layer, kv_head).
#[derive(Debug, Clone, PartialEq)]
pub enum SideCodec {
    Identity,
    /// Quantize, optionally after rotating into a `d×d` orthogonal basis.
    Quantize { bits: u8, rotation: Option<Matrix> },
    /// Keep the span of a `d×r` frame (absorbed into the weights).
    Project { basis: Matrix },
    /// Absorb the `d×r` frame, then quantize the `r` retained coordinates.
    Hybrid { basis: Matrix, bits: u8 },
}

impl SideCodec {
    pub fn is_identity(&self) -> bool {
        matches!(self, SideCodec::Identity)
    }

    /// Frame to absorb into the projection weights, if any.
    pub fn absorbed_frame(&self) -> Option<&Matrix> {
        match self {
            SideCodec::Project { basis } | SideCodec::Hybrid { basis, .. } => Some(basis),
            _ => None,
        }
    }
}

/// Per-(layer, kv_head) codecs for keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecTable {
    pub scheme: CompressionScheme,
    /// `keys[layer][kv_head]`
    pub keys: Vec<Vec<SideCodec>>,
    pub values: Vec<Vec<SideCodec>>,
}

impl CodecTable {
    pub fn identity(layers: usize, kv_heads: usize) -> Self {
        Self {
            scheme: CompressionScheme::identity(),
            keys: vec![vec![SideCodec::Identity; kv_heads]; layers],
            values: vec![vec![SideCodec::Identity; kv_heads]; layers],
        }
    }

    pub fn codec(&self, side: Side, layer: usize, head: usize) -> &SideCodec {
        match side {
            Side::Key => &self.keys[layer][head],
            Side::Value => &self.values[layer][head],
        }
    }
}
