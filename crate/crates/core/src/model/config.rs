use crate::error::{Error, Result};

/// Shape of the toy decoder. The residual width is `query_heads × head_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Hidden width of the per-layer ReLU MLP; 0 builds an attention-only model.
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.kv_heads == 0 || self.query_heads == 0 {
            return fail("head counts must be at least 1".into());
        }
        if !self.query_heads.is_multiple_of(self.kv_heads) {
            return fail(format!(
                "query_heads ({}) must be divisible by kv_heads ({})",
                self.query_heads, self.kv_heads
            ));
        }
        if self.head_dim < 4 {
            return fail(format!("head_dim {} below minimum 4", self.head_dim));
        }
        if self.vocab < 2 {
            return fail(format!("vocab {} below minimum 2", self.vocab));
        }
        if self.max_seq == 0 {
            return fail("max_seq must be at least 1".into());
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }

    pub fn model_dim(&self) -> usize {
        self.query_heads * self.head_dim
    }

    /// KV head read by query head `q`.
    pub fn kv_head_of(&self, q: usize) -> usize {
        q / self.group_size()
    }

    /// Query heads reading KV head `kv`.
    pub fn query_heads_of(&self, kv: usize) -> std::ops::Range<usize> {
        let g = self.group_size();
        kv * g..(kv + 1) * g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(q: usize, kv: usize) -> ModelConfig {
        ModelConfig { layers: 2, query_heads: q, kv_heads: kv, head_dim: 8, vocab: 16, max_seq: 8, mlp_hidden: 0, seed: 0 }
    }

    #[test]
    fn gqa_wiring() {
        let c = cfg(8, 2);
        assert_eq!(c.group_size(), 4);
        assert_eq!(c.query_heads_of(1), 4..8);
        assert_eq!(c.kv_head_of(5), 1);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(cfg(6, 4).validate().is_err());
        assert!(ModelConfig { head_dim: 3, ..cfg(4, 2) }.validate().is_err());
        assert!(ModelConfig { vocab: 1, ..cfg(4, 2) }.validate().is_err());
        assert!(cfg(4, 4).validate().is_ok());
    }
}
