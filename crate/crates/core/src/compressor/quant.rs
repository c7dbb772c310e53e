//! Symmetric per-channel integer quantization.
//!
//! `scale_c = max_t |x[t][c]| / (2^{b-1} - 1)`, codes are `x / scale` rounded
//! half-to-even onto `[-(2^{b-1}-1), 2^{b-1}-1]` and dequantization is
//! `code × scale`. Scales are stored as `f32`; codes are always computed
//! against the stored scale so dequantization is exact.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"KVQB";
const VERSION: u8 = 1;

/// Largest representable code magnitude at `bits`.
pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::arg(format!("bit width {bits} outside [2, 16]")));
    }
    Ok(())
}

/// Integer codes plus one scale per channel (column).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    rows: usize,
    cols: usize,
    bits: u8,
    codes: Vec<i16>,
    scales: Vec<f32>,
}

impl QuantizedBlock {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn codes(&self) -> &[i16] {
        &self.codes
    }

    pub fn code(&self, r: usize, c: usize) -> i16 {
        self.codes[r * self.cols + c]
    }

    pub fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| f64::from(self.code(r, c)) * f64::from(self.scales[c]))
    }

    /// Dequantized row `r`.
    pub fn dequantize_row(&self, r: usize) -> Vec<f64> {
        (0..self.cols).map(|c| f64::from(self.code(r, c)) * f64::from(self.scales[c])).collect()
    }

    /// Appends rows quantized against the existing scales, saturating at the
    /// grid edge for values beyond the calibrated range.
    pub fn append(&mut self, x: &Matrix) -> Result<()> {
        if x.cols() != self.cols {
            return Err(Error::dim(format!("append: {} channels into a {}-channel block", x.cols(), self.cols)));
        }
        let q = qmax(self.bits);
        for r in 0..x.rows() {
            for c in 0..self.cols {
                self.codes.push(encode(x[(r, c)], self.scales[c], q));
            }
        }
        self.rows += x.rows();
        Ok(())
    }

    /// Bit-packed serialization.
    ///
    /// Layout (little-endian): magic `KVQB`, version `u8`, bits `u8`, rows
    /// `u32`, cols `u32`; then `rows·cols` codes in row-major, channel-minor
    /// order, each a `bits`-wide two's-complement field packed LSB-first into a
    /// continuous bit stream padded with zeros to a whole byte; then `cols`
    /// `f32` scales.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + (self.codes.len() * self.bits as usize).div_ceil(8) + 4 * self.cols);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.bits);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        let mask = (1u32 << self.bits) - 1;
        let mut acc: u64 = 0;
        let mut filled = 0u32;
        for &c in &self.codes {
            acc |= u64::from(c as i32 as u32 & mask) << filled;
            filled += u32::from(self.bits);
            while filled >= 8 {
                out.push(acc as u8);
                acc >>= 8;
                filled -= 8;
            }
        }
        if filled > 0 {
            out.push(acc as u8);
        }
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("quantized block: {m}"));
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad("unsupported version"));
        }
        let bits = bytes[5];
        check_bits(bits).map_err(|_| bad("bit width out of range"))?;
        let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let n = rows * cols;
        let code_bytes = (n * bits as usize).div_ceil(8);
        if bytes.len() != 14 + code_bytes + 4 * cols {
            return Err(bad("length does not match header"));
        }
        let payload = &bytes[14..14 + code_bytes];
        let mask = (1u64 << bits) - 1;
        let sign = 1i64 << (bits - 1);
        let mut codes = Vec::with_capacity(n);
        let mut acc: u64 = 0;
        let mut filled = 0u32;
        let mut iter = payload.iter();
        for _ in 0..n {
            while filled < u32::from(bits) {
                acc |= u64::from(*iter.next().ok_or_else(|| bad("truncated codes"))?) << filled;
                filled += 8;
            }
            let raw = (acc & mask) as i64;
            acc >>= bits;
            filled -= u32::from(bits);
            let v = if raw >= sign { raw - (1i64 << bits) } else { raw };
            codes.push(v as i16);
        }
        let scales = bytes[14 + code_bytes..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { rows, cols, bits, codes, scales })
    }
}

#[inline]
fn encode(x: f64, scale: f32, q: i32) -> i16 {
    if scale == 0.0 {
        return 0;
    }
    let code = (x / f64::from(scale)).round_ties_even();
    code.clamp(-f64::from(q), f64::from(q)) as i16
}

/// Per-channel scales `max|x_c| / qmax`, rounded to `f32`.
pub fn channel_scales(x: &Matrix, bits: u8) -> Vec<f32> {
    let q = f64::from(qmax(bits));
    (0..x.cols())
        .map(|c| {
            let m = (0..x.rows()).fold(0.0f64, |m, r| m.max(x[(r, c)].abs()));
            (m / q) as f32
        })
        .collect()
}

/// Quantizes `x` (tokens × channels) with one scale per channel.
pub fn quantize(x: &Matrix, bits: u8) -> Result<QuantizedBlock> {
    check_bits(bits)?;
    if !x.is_finite() {
        return Err(Error::arg("quantize: non-finite input"));
    }
    let scales = channel_scales(x, bits);
    quantize_with_scales(x, bits, scales)
}

/// Quantizes `x` against caller-supplied scales (saturating out-of-range values).
pub fn quantize_with_scales(x: &Matrix, bits: u8, scales: Vec<f32>) -> Result<QuantizedBlock> {
    check_bits(bits)?;
    if scales.len() != x.cols() {
        return Err(Error::dim(format!("{} scales for {} channels", scales.len(), x.cols())));
    }
    let mut block = QuantizedBlock { rows: 0, cols: x.cols(), bits, codes: Vec::with_capacity(x.rows() * x.cols()), scales };
    block.append(x)?;
    Ok(block)
}

/// A block quantized in a rotated coordinate system.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedBlock {
    pub block: QuantizedBlock,
    pub basis: Matrix,
}

impl RotatedBlock {
    /// Dequantize, then counter-rotate back to the original coordinates.
    pub fn reconstruct(&self) -> Matrix {
        self.block.dequantize().matmul_t(&self.basis).expect("basis matches block width")
    }
}

/// Maximum deviation of `QᵀQ` from the identity.
pub fn orthonormality_error(q: &Matrix) -> f64 {
    q.t_matmul(q).expect("square gram").max_abs_diff(&Matrix::identity(q.cols()))
}

/// Rotates `x` into the basis `q` (columns are basis vectors), then quantizes.
pub fn rotate_quantize(x: &Matrix, q: &Matrix, bits: u8) -> Result<RotatedBlock> {
    if !q.is_square() || q.rows() != x.cols() {
        return Err(Error::dim(format!("rotation must be {0}x{0}, got {1}x{2}", x.cols(), q.rows(), q.cols())));
    }
    let err = orthonormality_error(q);
    if err > 1e-9 {
        return Err(Error::arg(format!("rotation is not orthogonal (‖QᵀQ − I‖ = {err:e})")));
    }
    let rotated = x.matmul(q)?;
    Ok(RotatedBlock { block: quantize(&rotated, bits)?, basis: q.clone() })
}
