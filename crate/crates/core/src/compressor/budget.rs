//! Bits-per-token-per-head accounting.
//!
//! Data bits follow the matched-budget convention: a quantized side stores
//! `d·b` bits, a projected side `r·16` (FP16 coordinates), a hybrid `r·b`, and
//! an uncompressed side `d·16`. Per-channel scales are overhead, never data.

use super::scheme::{CompressionScheme, Paradigm};

/// Bits of one FP16 element; the reference precision for budgets.
pub const FP16_BITS: usize = 16;
/// Storage width of one per-channel scale.
pub const SCALE_BITS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    pub head_dim: usize,
    pub seq_len: usize,
    /// Data bits per token per head, summed over the sides the scheme
    /// compresses (the value side at FP16 for the identity scheme).
    pub data_bits_per_token_per_head: usize,
    pub key_bits: usize,
    pub value_bits: usize,
    /// Number of per-channel scales stored once per sequence per head.
    pub scale_channels: usize,
    pub total_fraction_of_fp16: f64,
}

impl BudgetLedger {
    /// Scale storage per sequence per head at `scale_bits` per scale.
    pub fn scale_overhead_bits(&self, scale_bits: usize) -> usize {
        self.scale_channels * scale_bits
    }

    /// Scale overhead relative to data bits, amortized over `seq_len` tokens.
    pub fn overhead_fraction(&self, scale_bits: usize) -> f64 {
        if self.scale_channels == 0 || self.seq_len == 0 {
            return 0.0;
        }
        self.scale_overhead_bits(scale_bits) as f64 / (self.seq_len * self.data_bits_per_token_per_head) as f64
    }

    /// K+V bits per token per head with uncompressed sides at FP16.
    pub fn kv_bits(&self) -> usize {
        self.key_bits + self.value_bits
    }

    pub fn kv_fraction_of_fp16(&self) -> f64 {
        self.kv_bits() as f64 / (2 * FP16_BITS * self.head_dim) as f64
    }

    /// Two schemes are budget-matched iff they store the same data bits.
    pub fn matches(&self, other: &BudgetLedger) -> bool {
        self.data_bits_per_token_per_head == other.data_bits_per_token_per_head
    }
}

fn side_bits(p: Paradigm, d: usize) -> usize {
    match p {
        Paradigm::Identity => d * FP16_BITS,
        Paradigm::Quantize { bits } => d * bits as usize,
        Paradigm::Project { rank } => rank * FP16_BITS,
        Paradigm::Hybrid { rank, bits } => rank * bits as usize,
    }
}

fn side_scales(p: Paradigm, d: usize) -> usize {
    match p {
        Paradigm::Quantize { .. } => d,
        Paradigm::Hybrid { rank, .. } => rank,
        _ => 0,
    }
}

pub fn budget(scheme: &CompressionScheme, head_dim: usize, seq_len: usize) -> BudgetLedger {
    let (k, v) = (scheme.key.paradigm, scheme.value.paradigm);
    let key_bits = side_bits(k, head_dim);
    let value_bits = side_bits(v, head_dim);
    let compressed: Vec<usize> = [(k, key_bits), (v, value_bits)]
        .into_iter()
        .filter(|(p, _)| !p.is_identity())
        .map(|(_, b)| b)
        .collect();
    let (data, sides) = if compressed.is_empty() {
        (value_bits, 1)
    } else {
        (compressed.iter().sum(), compressed.len())
    };
    BudgetLedger {
        head_dim,
        seq_len,
        data_bits_per_token_per_head: data,
        key_bits,
        value_bits,
        scale_channels: side_scales(k, head_dim) + side_scales(v, head_dim),
        total_fraction_of_fp16: data as f64 / (sides * FP16_BITS * head_dim) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matched_budget_rows_at_d128() {
        assert_eq!(budget(&CompressionScheme::quantize_v(4), 128, 256).data_bits_per_token_per_head, 512);
        assert_eq!(budget(&CompressionScheme::project_v(32), 128, 256).data_bits_per_token_per_head, 512);
        assert_eq!(budget(&CompressionScheme::hybrid_v(64, 8), 128, 256).data_bits_per_token_per_head, 512);
        let l = budget(&CompressionScheme::quantize_v(4), 128, 256);
        assert!((l.total_fraction_of_fp16 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn matched_triple_for_any_d_divisible_by_four() {
        for d in (4..=256).step_by(4) {
            let q = budget(&CompressionScheme::quantize_v(4), d, 64);
            let p = budget(&CompressionScheme::project_v(d / 4), d, 64);
            let h = budget(&CompressionScheme::hybrid_v(d / 2, 8), d, 64);
            assert!(q.matches(&p) && p.matches(&h));
        }
    }

    #[test]
    fn scale_overhead() {
        let l = budget(&CompressionScheme::quantize_v(4), 128, 256);
        // 32/(T·b) with 32-bit scales
        assert!((l.overhead_fraction(SCALE_BITS) - 0.03125).abs() < 1e-15);
        // FP16 scales bring INT4 at T=256 below 2%.
        assert!(l.overhead_fraction(16) < 0.02);
        assert_eq!(budget(&CompressionScheme::project_v(32), 128, 256).overhead_fraction(SCALE_BITS), 0.0);
    }

    #[test]
    fn identity_and_joint_accounting() {
        let id = budget(&CompressionScheme::identity(), 64, 128);
        assert_eq!(id.data_bits_per_token_per_head, 1024);
        assert_eq!(id.total_fraction_of_fp16, 1.0);
        let joint: CompressionScheme = "k=int4 v=int4".parse().unwrap();
        let l = budget(&joint, 64, 128);
        assert_eq!(l.data_bits_per_token_per_head, 512);
        assert!((l.kv_fraction_of_fp16() - 0.25).abs() < 1e-12);
    }
}
