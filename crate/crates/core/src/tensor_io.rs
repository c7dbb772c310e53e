//! Named-tensor records shared by the model weight file and metric bundles.
//!
//! One record, all integers little-endian:
//!
//! ```text
//! name_len: u16 | name: utf-8 bytes | dtype: u8 (0 = f32, 1 = f64)
//! ndim: u8 | dims: u32 × ndim | data: row-major, dtype-wide LE floats
//! ```

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn matrix(name: &str, dtype: DType, m: &Matrix) -> Self {
        Self { name: name.to_string(), dtype, shape: vec![m.rows(), m.cols()], data: m.as_slice().to_vec() }
    }

    pub fn vector(name: &str, dtype: DType, v: &[f64]) -> Self {
        Self { name: name.to_string(), dtype, shape: vec![v.len()], data: v.to_vec() }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, self.data),
            _ => Err(Error::Format(format!("tensor `{}` is not two-dimensional", self.name))),
        }
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        let name = self.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(self.dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            match self.dtype {
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let dtype = DType::from_code(r.u8()?)?;
        let ndim = r.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?,
            DType::F64 => (0..n).map(|_| r.f64()).collect::<Result<_>>()?,
        };
        Ok(Self { name, dtype, shape, data })
    }
}

/// Cursor over a byte slice with little-endian primitive readers.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let m = Matrix::from_fn(3, 2, |r, c| r as f64 - 0.5 * c as f64);
        for dtype in [DType::F32, DType::F64] {
            let rec = TensorRecord::matrix("w", dtype, &m);
            let mut buf = Vec::new();
            rec.write(&mut buf);
            let mut r = ByteReader::new(&buf);
            let back = TensorRecord::read(&mut r).unwrap();
            assert!(r.is_empty());
            assert_eq!(back.into_matrix().unwrap(), m);
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut buf = Vec::new();
        TensorRecord::vector("v", DType::F64, &[1.0, 2.0]).write(&mut buf);
        buf.pop();
        assert!(TensorRecord::read(&mut ByteReader::new(&buf)).is_err());
    }
}
