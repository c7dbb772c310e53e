//! Next-token training with hand-written backpropagation and Adam.

use rand::Rng;

use super::forward::{attend, rms_norm};
use super::{Model, Weights};
use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_into, log_sum_exp, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub steps: usize,
    /// Windows per step.
    pub batch: usize,
    /// Tokens per window (at most the model's `max_seq`).
    pub seq_len: usize,
    /// Peak Adam step size; linear warmup over the first 5% of steps, then
    /// cosine decay to a tenth of the peak.
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { steps: 300, batch: 4, seq_len: 32, lr: 3e-3, clip: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean next-token loss (nats) of each step's batch, before its update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Means over consecutive non-overlapping windows of `w` steps.
    pub fn smoothed(&self, w: usize) -> Vec<f64> {
        self.losses.chunks(w.max(1)).filter(|c| c.len() == w.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }
}

struct LayerTape {
    x: Matrix,
    h: Matrix,
    s: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    alpha: Vec<Matrix>,
    att: Matrix,
    x_mid: Matrix,
    h2: Matrix,
    s2: Vec<f64>,
    a: Matrix,
}

fn rms_backward(x: &Matrix, s: &[f64], dy: &Matrix) -> Matrix {
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let (xr, gr) = (x.row(r), dy.row(r));
        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let si = s[r];
        let c = si * si * si * dot / d;
        for (o, (a, g)) in dx.row_mut(r).iter_mut().zip(xr.iter().zip(gr)) {
            *o = si * g - c * a;
        }
    }
    dx
}

/// Summed cross-entropy of `targets` given `inputs`, accumulating
/// `scale · ∂loss/∂θ` into `grads`.
pub(crate) fn loss_and_grad(model: &Model, inputs: &[u32], targets: &[u32], scale: f64, grads: &mut Weights) -> f64 {
    let cfg = model.config();
    let w = model.weights();
    let (n, hd, dm) = (inputs.len(), cfg.head_dim, cfg.model_dim());
    let mut x = Matrix::from_fn(n, dm, |i, c| w.tok_emb[(inputs[i] as usize, c)] + w.pos_emb[(i, c)]);
    let mut tapes = Vec::with_capacity(cfg.layers);
    for lw in &w.layers {
        let (h, s) = rms_norm(&x);
        let q = h.matmul(&lw.wq).unwrap();
        let k = h.matmul(&lw.wk).unwrap();
        let v = h.matmul(&lw.wv).unwrap();
        let mut att = Matrix::zeros(n, cfg.query_heads * hd);
        let mut alpha = Vec::with_capacity(cfg.query_heads);
        for i in 0..cfg.query_heads {
            let j = cfg.kv_head_of(i);
            let (_, a, out) =
                attend(&q.columns(i * hd, (i + 1) * hd), &k.columns(j * hd, (j + 1) * hd), &v.columns(j * hd, (j + 1) * hd), 0);
            super::forward::copy_columns(&mut att, &out, i * hd);
            alpha.push(a);
        }
        let x_mid = x.add(&att.matmul(&lw.wo).unwrap()).unwrap();
        let (h2, s2, a, x_out) = if cfg.mlp_hidden > 0 {
            let (h2, s2) = rms_norm(&x_mid);
            let a = h2.matmul(&lw.w1).unwrap().map(|v| v.max(0.0));
            let x_out = x_mid.add(&a.matmul(&lw.w2).unwrap()).unwrap();
            (h2, s2, a, x_out)
        } else {
            (Matrix::zeros(0, 0), vec![], Matrix::zeros(0, 0), x_mid.clone())
        };
        tapes.push(LayerTape { x: std::mem::replace(&mut x, x_out), h, s, q, k, v, alpha, att, x_mid, h2, s2, a });
    }
    let (hf, sf) = rms_norm(&x);
    let logits = hf.matmul(&w.unembed).unwrap();

    let mut loss = 0.0;
    let mut dlogits = logits.clone();
    for (t, &y) in targets.iter().enumerate() {
        let row = dlogits.row_mut(t);
        let lse = log_sum_exp(row);
        loss += lse - row[y as usize];
        row.iter_mut().for_each(|z| *z = scale * (*z - lse).exp());
        row[y as usize] -= scale;
    }

    gemm_into(&hf, true, &dlogits, false, 1.0, &mut grads.unembed);
    let dhf = gemm(&dlogits, false, &w.unembed, true).unwrap();
    let mut dx = rms_backward(&x, &sf, &dhf);
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    for (l, tape) in tapes.iter().enumerate().rev() {
        let lw = &w.layers[l];
        let gl = &mut grads.layers[l];
        if cfg.mlp_hidden > 0 {
            gemm_into(&tape.a, true, &dx, false, 1.0, &mut gl.w2);
            let mut da = gemm(&dx, false, &lw.w2, true).unwrap();
            for (g, a) in da.as_mut_slice().iter_mut().zip(tape.a.as_slice()) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            gemm_into(&tape.h2, true, &da, false, 1.0, &mut gl.w1);
            let dh2 = gemm(&da, false, &lw.w1, true).unwrap();
            dx.add_assign(&rms_backward(&tape.x_mid, &tape.s2, &dh2)).unwrap();
        }
        gemm_into(&tape.att, true, &dx, false, 1.0, &mut gl.wo);
        let datt = gemm(&dx, false, &lw.wo, true).unwrap();
        let mut dq = Matrix::zeros(n, cfg.query_heads * hd);
        let mut dk = Matrix::zeros(n, cfg.kv_heads * hd);
        let mut dv = Matrix::zeros(n, cfg.kv_heads * hd);
        for i in 0..cfg.query_heads {
            let j = cfg.kv_head_of(i);
            let alpha = &tape.alpha[i];
            let kj = tape.k.columns(j * hd, (j + 1) * hd);
            let vj = tape.v.columns(j * hd, (j + 1) * hd);
            let qi = tape.q.columns(i * hd, (i + 1) * hd);
            let d_out = datt.columns(i * hd, (i + 1) * hd);
            let mut ds = gemm(&d_out, false, &vj, true).unwrap();
            for r in 0..n {
                let (ar, dr) = (alpha.row(r), ds.row_mut(r));
                let dot: f64 = ar.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, a) in dr.iter_mut().zip(ar) {
                    *g = a * (*g - dot) * inv_sqrt;
                }
            }
            let dvj = gemm(alpha, true, &d_out, false).unwrap();
            let dqi = ds.matmul(&kj).unwrap();
            let dkj = gemm(&ds, true, &qi, false).unwrap();
            super::forward::copy_columns(&mut dq, &dqi, i * hd);
            for r in 0..n {
                let (kr, vr) = (&mut dk.row_mut(r)[j * hd..(j + 1) * hd], dkj.row(r));
                kr.iter_mut().zip(vr).for_each(|(a, b)| *a += b);
                let (vr, dr) = (&mut dv.row_mut(r)[j * hd..(j + 1) * hd], dvj.row(r));
                vr.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
            }
        }
        gemm_into(&tape.h, true, &dq, false, 1.0, &mut gl.wq);
        gemm_into(&tape.h, true, &dk, false, 1.0, &mut gl.wk);
        gemm_into(&tape.h, true, &dv, false, 1.0, &mut gl.wv);
        let mut dh = gemm(&dq, false, &lw.wq, true).unwrap();
        gemm_into(&dk, false, &lw.wk, true, 1.0, &mut dh);
        gemm_into(&dv, false, &lw.wv, true, 1.0, &mut dh);
        dx.add_assign(&rms_backward(&tape.x, &tape.s, &dh)).unwrap();
    }
    for (i, &t) in inputs.iter().enumerate() {
        let g = dx.row(i);
        grads.tok_emb.row_mut(t as usize).iter_mut().zip(g).for_each(|(a, b)| *a += b);
        grads.pos_emb.row_mut(i).iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    loss
}

fn learning_rate(spec: &TrainSpec, step: usize) -> f64 {
    let warm = (spec.steps / 20).max(1);
    if step < warm {
        return spec.lr * (step + 1) as f64 / warm as f64;
    }
    let p = (step - warm) as f64 / (spec.steps - warm).max(1) as f64;
    spec.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Trains a copy of `model` on random windows of `stream`. The result
/// depends only on the inputs and `spec.seed`; `steps = 0` returns the model
/// unchanged.
pub fn train_toy(model: &Model, stream: &[u32], spec: &TrainSpec) -> Result<(Model, TrainReport)> {
    let cfg = *model.config();
    let mut model = model.clone();
    let mut report = TrainReport::default();
    if spec.steps == 0 {
        return Ok((model, report));
    }
    if spec.seq_len == 0 || spec.seq_len > cfg.max_seq || spec.batch == 0 {
        return Err(Error::Config(format!(
            "training windows need 1 ≤ seq_len ≤ {} and batch ≥ 1",
            cfg.max_seq
        )));
    }
    if stream.len() < spec.seq_len + 1 {
        return Err(Error::arg(format!("training stream needs at least {} tokens", spec.seq_len + 1)));
    }
    if let Some(&t) = stream.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::arg(format!("token {t} outside vocabulary of {}", cfg.vocab)));
    }
    let mut rng = crate::seed::rng(spec.seed, "train/windows");
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let sizes: Vec<usize> = model.weights().named().iter().map(|(_, m)| m.rows() * m.cols()).collect();
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut m2 = m1.clone();
    let scale = 1.0 / (spec.batch * spec.seq_len) as f64;
    for step in 0..spec.steps {
        let mut grads = model.weights().zeros_like();
        let mut loss = 0.0;
        for _ in 0..spec.batch {
            let start = rng.random_range(0..=stream.len() - spec.seq_len - 1);
            let win = &stream[start..start + spec.seq_len + 1];
            loss += loss_and_grad(&model, &win[..spec.seq_len], &win[1..], scale, &mut grads);
        }
        report.losses.push(loss * scale);
        let mut gt = grads.tensors_mut();
        let gnorm = gt.iter().map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if gnorm > spec.clip { spec.clip / gnorm } else { 1.0 };
        let lr = learning_rate(spec, step);
        let (c1, c2) = (1.0 - b1.powi(step as i32 + 1), 1.0 - b2.powi(step as i32 + 1));
        for (((p, g), m), v) in model.weights_mut().tensors_mut().into_iter().zip(gt.iter_mut()).zip(&mut m1).zip(&mut m2) {
            for (((pi, gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            p.round_to_f32();
        }
    }
    if !model.weights().named().iter().all(|(_, m)| m.is_finite()) {
        return Err(Error::Numerical("training diverged to non-finite weights".into()));
    }
    Ok((model, report))
}
