use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::linalg::Matrix;

/// One decoder block. Row-vector convention: `q = h · wq`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// model_dim × (query_heads·head_dim)
    pub wq: Matrix,
    /// model_dim × (kv_heads·head_dim)
    pub wk: Matrix,
    /// model_dim × (kv_heads·head_dim)
    pub wv: Matrix,
    /// (query_heads·head_dim) × model_dim
    pub wo: Matrix,
    /// model_dim × mlp_hidden
    pub w1: Matrix,
    /// mlp_hidden × model_dim
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// vocab × model_dim
    pub tok_emb: Matrix,
    /// max_seq × model_dim
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    /// model_dim × vocab
    pub unembed: Matrix,
}

fn init<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut m = Matrix::from_fn(rows, cols, |_, _| s * rng.sample::<f64, _>(StandardNormal));
    m.round_to_f32();
    m
}

impl Weights {
    /// Gaussian initialization with per-tensor scale `1/√fan_in`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = crate::seed::rng(cfg.seed, "model/init");
        let dm = cfg.model_dim();
        let hd = cfg.head_dim;
        let tok_emb = init(cfg.vocab, dm, cfg.vocab, &mut rng);
        let pos_emb = init(cfg.max_seq, dm, cfg.max_seq, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                wq: init(dm, cfg.query_heads * hd, dm, &mut rng),
                wk: init(dm, cfg.kv_heads * hd, dm, &mut rng),
                wv: init(dm, cfg.kv_heads * hd, dm, &mut rng),
                wo: init(cfg.query_heads * hd, dm, cfg.query_heads * hd, &mut rng),
                w1: init(dm, cfg.mlp_hidden, dm, &mut rng),
                w2: init(cfg.mlp_hidden, dm, cfg.mlp_hidden, &mut rng),
            })
            .collect();
        let unembed = init(dm, cfg.vocab, dm, &mut rng);
        Self { tok_emb, pos_emb, layers, unembed }
    }

    /// Canonical tensor names and shapes for `cfg`, in file order.
    pub fn init_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let dm = cfg.model_dim();
        let qd = cfg.query_heads * cfg.head_dim;
        let kd = cfg.kv_heads * cfg.head_dim;
        let mut out = vec![("tok_emb".to_string(), (cfg.vocab, dm)), ("pos_emb".to_string(), (cfg.max_seq, dm))];
        for i in 0..cfg.layers {
            for (n, s) in [
                ("wq", (dm, qd)),
                ("wk", (dm, kd)),
                ("wv", (dm, kd)),
                ("wo", (qd, dm)),
                ("w1", (dm, cfg.mlp_hidden)),
                ("w2", (cfg.mlp_hidden, dm)),
            ] {
                out.push((format!("layers.{i}.{n}"), s));
            }
        }
        out.push(("unembed".to_string(), (dm, cfg.vocab)));
        out
    }

    /// All-zero weights with the shapes of `cfg`.
    pub fn init_zeroed(cfg: &ModelConfig) -> Self {
        let z = |(r, c): (usize, usize)| Matrix::zeros(r, c);
        let dm = cfg.model_dim();
        let qd = cfg.query_heads * cfg.head_dim;
        let kd = cfg.kv_heads * cfg.head_dim;
        Self {
            tok_emb: z((cfg.vocab, dm)),
            pos_emb: z((cfg.max_seq, dm)),
            layers: (0..cfg.layers)
                .map(|_| LayerWeights {
                    wq: z((dm, qd)),
                    wk: z((dm, kd)),
                    wv: z((dm, kd)),
                    wo: z((qd, dm)),
                    w1: z((dm, cfg.mlp_hidden)),
                    w2: z((cfg.mlp_hidden, dm)),
                })
                .collect(),
            unembed: z((dm, cfg.vocab)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    w1: z(&l.w1),
                    w2: z(&l.w2),
                })
                .collect(),
            unembed: z(&self.unembed),
        }
    }

    /// Tensors in file order with their canonical names.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, m) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo), ("w1", &l.w1), ("w2", &l.w2)] {
                out.push((format!("layers.{i}.{n}"), m));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2]);
        }
        out.push(&mut self.unembed);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }
}
