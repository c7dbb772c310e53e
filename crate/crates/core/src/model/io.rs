//! Model weight file.
//!
//! ```text
//! magic "KVLM" | version: u32 = 1
//! config: layers, query_heads, kv_heads, head_dim, vocab, max_seq, mlp_hidden (u32 each), seed: u64
//! tensor_count: u32 | tensor records (f32, see `tensor_io`)
//! ```
//!
//! All integers little-endian. Weights are `f32`-representable, so a save and
//! load round trip is bit-exact.

use std::path::Path;

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::tensor_io::{ByteReader, DType, TensorRecord};

const MAGIC: &[u8; 4] = b"KVLM";
const VERSION: u32 = 1;

pub fn write_config(cfg: &ModelConfig, out: &mut Vec<u8>) {
    for v in [cfg.layers, cfg.query_heads, cfg.kv_heads, cfg.head_dim, cfg.vocab, cfg.max_seq, cfg.mlp_hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
}

pub fn read_config(r: &mut ByteReader<'_>) -> Result<ModelConfig> {
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let cfg = ModelConfig {
        layers: f[0],
        query_heads: f[1],
        kv_heads: f[2],
        head_dim: f[3],
        vocab: f[4],
        max_seq: f[5],
        mlp_hidden: f[6],
        seed: r.u64()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_config(model.config(), &mut out);
    let named = model.weights().named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, m) in named {
        TensorRecord::matrix(&name, DType::F32, m).write(&mut out);
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model weight file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let cfg = read_config(&mut r)?;
    let count = r.u32()? as usize;
    let shapes = Weights::init_shapes(&cfg);
    if count != shapes.len() {
        return Err(Error::Format(format!("expected {} tensors, file has {count}", shapes.len())));
    }
    let mut weights = Weights::init_zeroed(&cfg);
    for ((name, _), slot) in shapes.iter().zip(weights.tensors_mut()) {
        let rec = TensorRecord::read(&mut r)?;
        if &rec.name != name {
            return Err(Error::Format(format!("expected tensor `{name}`, found `{}`", rec.name)));
        }
        let m = rec.into_matrix()?;
        if m.shape() != slot.shape() {
            return Err(Error::Format(format!("tensor `{name}` has shape {:?}", m.shape())));
        }
        *slot = m;
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Model::from_parts(cfg, weights)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
