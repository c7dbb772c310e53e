use kvlab_core::compressor::{CodecTable, CompressionScheme, Side, SideCodec};
use kvlab_core::model::data::{periodic_stream, uniform_stream, PhraseMachine, PhraseSpec};
use kvlab_core::model::{
    capture_calibration, perplexity, train_toy, ForwardOptions, Model, ModelConfig, TrainSpec, ValueShift,
};
use kvlab_core::Matrix;
use proptest::prelude::*;

fn cfg(q: usize, kv: usize, d: usize) -> ModelConfig {
    ModelConfig { layers: 2, query_heads: q, kv_heads: kv, head_dim: d, vocab: 24, max_seq: 16, mlp_hidden: 32, seed: 7 }
}

fn values_codec(cfg: &ModelConfig, codec: SideCodec) -> CodecTable {
    let mut t = CodecTable::identity(cfg.layers, cfg.kv_heads);
    t.scheme = CompressionScheme::quantize_v(8);
    for row in &mut t.values {
        row.iter_mut().for_each(|c| *c = codec.clone());
    }
    t
}

/// Logits computed one token at a time (cache) vs all at once.
fn incremental(model: &Model, tokens: &[u32]) -> Matrix {
    let mut cache = model.new_cache();
    let rows: Vec<Vec<f64>> =
        tokens.iter().map(|&t| model.forward(&[t], &mut cache).unwrap().row(0).to_vec()).collect();
    Matrix::from_rows(&rows).unwrap()
}

#[test]
fn same_seed_builds_identical_models() {
    let a = Model::build(cfg(4, 2, 8)).unwrap();
    let b = Model::build(cfg(4, 2, 8)).unwrap();
    assert_eq!(a, b);
    let prompt = [1, 5, 9, 2];
    assert_eq!(a.forward(&prompt, &mut a.new_cache()).unwrap(), b.forward(&prompt, &mut b.new_cache()).unwrap());
    let c = Model::build(ModelConfig { seed: 8, ..cfg(4, 2, 8) }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn cache_matches_recompute_on_every_layout() {
    for c in [cfg(2, 2, 16), cfg(4, 2, 16), cfg(4, 1, 32)] {
        let m = Model::build(c).unwrap();
        let tokens: Vec<u32> = (0..12).map(|i| (i * 7 % 24) as u32).collect();
        let full = m.forward(&tokens, &mut m.new_cache()).unwrap();
        let step = incremental(&m, &tokens);
        assert!(full.max_abs_diff(&step) <= 1e-5, "{c:?}: {}", full.max_abs_diff(&step));
    }
}

#[test]
fn out_of_vocab_and_overlong_inputs_are_rejected() {
    let m = Model::build(cfg(2, 1, 8)).unwrap();
    assert!(m.forward(&[24], &mut m.new_cache()).is_err());
    assert!(m.forward(&[0; 17], &mut m.new_cache()).is_err());
}

#[test]
fn logit_error_shrinks_with_bit_width() {
    let c = cfg(4, 2, 16);
    let m = Model::build(c).unwrap();
    let prompt: Vec<u32> = (0..16).map(|i| (i * 5 % 24) as u32).collect();
    let clean = m.forward(&prompt, &mut m.new_cache()).unwrap();
    let errs: Vec<f64> = [4u8, 8, 16]
        .iter()
        .map(|&bits| {
            let t = values_codec(&c, SideCodec::Quantize { bits, rotation: None });
            m.compress(&t).unwrap().forward(&prompt).unwrap().max_abs_diff(&clean)
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    assert!(errs[2] < 1e-3);
}

#[test]
fn uniform_logits_give_vocabulary_perplexity() {
    let c = ModelConfig { vocab: 50, ..cfg(2, 1, 8) };
    let mut m = Model::build(c).unwrap();
    m.weights_mut().unembed = Matrix::zeros(c.model_dim(), 50);
    let stream = uniform_stream(50, 100, 3);
    let ppl = perplexity(&m, &stream, &CodecTable::identity(2, 1)).unwrap();
    assert!((ppl - 50.0).abs() <= 1e-9);
    assert!(perplexity(&m, &[3], &CodecTable::identity(2, 1)).is_err());
    assert!(perplexity(&m, &[], &CodecTable::identity(2, 1)).is_err());
}

#[test]
fn untrained_perplexity_is_near_vocabulary_size() {
    for seed in 0..4 {
        let c = ModelConfig { seed, ..cfg(4, 2, 8) };
        let m = Model::build(c).unwrap();
        let stream = uniform_stream(c.vocab, 400, seed + 100);
        let ppl = perplexity(&m, &stream, &CodecTable::identity(2, 2)).unwrap();
        let v = c.vocab as f64;
        assert!(ppl >= 0.5 * v && ppl <= 2.0 * v, "seed {seed}: {ppl}");
    }
}

#[test]
fn identity_perplexity_is_reproducible() {
    let m = Model::build(cfg(4, 2, 8)).unwrap();
    let s = uniform_stream(24, 64, 1);
    let t = CodecTable::identity(2, 2);
    assert_eq!(perplexity(&m, &s, &t).unwrap().to_bits(), perplexity(&m, &s, &t).unwrap().to_bits());
}

#[test]
fn shifting_one_kv_head_moves_exactly_its_query_heads() {
    let c = ModelConfig { query_heads: 8, kv_heads: 2, ..cfg(8, 2, 8) };
    let m = Model::build(c).unwrap();
    let tokens = [3, 1, 4, 1, 5, 9];
    let clean = m.forward_traced(&tokens, &mut m.new_cache(), &ForwardOptions::capture()).unwrap().1.unwrap();
    let opts = ForwardOptions {
        capture: true,
        value_shift: Some(ValueShift { layer: 1, kv_head: 1, delta: vec![0.5; c.head_dim] }),
    };
    let shifted = m.forward_traced(&tokens, &mut m.new_cache(), &opts).unwrap().1.unwrap();
    for q in 0..8 {
        let moved = clean.layers[1].head_out[q].max_abs_diff(&shifted.layers[1].head_out[q]) > 1e-9;
        assert_eq!(moved, (4..8).contains(&q), "query head {q}");
        assert_eq!(clean.layers[0].head_out[q], shifted.layers[0].head_out[q]);
    }
}

#[test]
fn exempt_layers_match_the_identity_scheme_bitwise() {
    let c = cfg(4, 2, 16);
    let m = Model::build(c).unwrap();
    let mut t = values_codec(&c, SideCodec::Quantize { bits: 2, rotation: None });
    t.values[0] = vec![SideCodec::Identity; 2];
    let tokens: Vec<u32> = (0..10).collect();
    let opts = ForwardOptions::capture();
    let clean = m.forward_traced(&tokens, &mut m.new_cache(), &opts).unwrap().1.unwrap();
    let lossy = m.compress(&t).unwrap().forward_traced(&tokens, &opts).unwrap().1.unwrap();
    assert_eq!(clean.layers[0].values, lossy.layers[0].values);
    assert_eq!(clean.layers[0].head_out, lossy.layers[0].head_out);
    assert_ne!(clean.layers[1].values, lossy.layers[1].values);
}

#[test]
fn quantized_cache_entries_lie_on_the_grid() {
    let c = cfg(4, 2, 16);
    let m = Model::build(c).unwrap();
    let t = values_codec(&c, SideCodec::Quantize { bits: 4, rotation: None });
    let cm = m.compress(&t).unwrap();
    let mut cache = cm.new_cache();
    cm.model().forward(&[1, 2, 3, 4], &mut cache).unwrap();
    let block = cache.quantized_block(1, 0, Side::Value).unwrap();
    assert_eq!(block.rows(), 4);
    assert!(block.codes().iter().all(|&q| q.abs() <= 7));
    assert_eq!(cache.read(1, 0, Side::Value, 0), block.dequantize());
}

#[test]
fn capture_shapes() {
    let c = cfg(4, 2, 8);
    let m = Model::build(c).unwrap();
    let acts = capture_calibration(&m, &[vec![5]]).unwrap();
    assert_eq!(acts[0][0].segments[0].alpha(), Matrix::from_rows(&[vec![1.0]]).unwrap());

    let acts = capture_calibration(&m, &[(0..8).collect(), (0..16).collect()]).unwrap();
    assert_eq!(acts.len(), 2);
    for head in acts.iter().flatten() {
        assert_eq!(head.values().rows(), 24);
        assert_eq!(head.group_size(), 2);
        for s in &head.segments {
            let a = s.alpha();
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                assert!(a.row(r)[r + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    let mha = Model::build(cfg(2, 2, 8)).unwrap();
    let acts = capture_calibration(&mha, &[(0..6).collect()]).unwrap();
    let s = &acts[1][1].segments[0];
    assert_eq!(s.alpha(), s.alpha_per_query[0]);
    assert!(capture_calibration(&mha, &[]).is_err());
}

#[test]
fn training_on_a_periodic_stream() {
    let c = ModelConfig { layers: 2, query_heads: 2, kv_heads: 1, head_dim: 16, vocab: 16, max_seq: 32, mlp_hidden: 0, seed: 1 };
    let m = Model::build(c).unwrap();
    let stream = periodic_stream(5, 400);
    let spec = TrainSpec { steps: 200, batch: 2, seq_len: 32, lr: 3e-3, clip: 1.0, seed: 2 };
    let (trained, report) = train_toy(&m, &stream, &spec).unwrap();
    let t = CodecTable::identity(2, 1);
    let ppl = perplexity(&trained, &stream[..128], &t).unwrap();
    assert!(ppl < c.vocab as f64 / 2.0, "ppl {ppl}");
    let smooth = report.smoothed(40);
    assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{smooth:?}");
}

#[test]
fn trained_attention_is_not_uniform() {
    let c = ModelConfig { layers: 2, query_heads: 2, kv_heads: 1, head_dim: 16, vocab: 32, max_seq: 32, mlp_hidden: 0, seed: 4 };
    let pm = PhraseMachine::new(32, PhraseSpec::default(), 4).unwrap();
    let stream = pm.stream(3000, 5);
    let spec = TrainSpec { steps: 200, batch: 2, seq_len: 32, lr: 3e-3, clip: 1.0, seed: 4 };
    let (m, _) = train_toy(&Model::build(c).unwrap(), &stream, &spec).unwrap();
    let acts = capture_calibration(&m, &[pm.stream(32, 6)]).unwrap();
    let mut gap: f64 = 0.0;
    for head in acts.iter().flatten() {
        for a in &head.segments[0].alpha_per_query {
            // Entropy relative to the uniform row over the same causal prefix.
            let deficits: Vec<f64> = (1..a.rows())
                .map(|t| ((t + 1) as f64).ln() - kvlab_core::linalg::entropy(&a.row(t)[..=t]))
                .collect();
            let hi = deficits.iter().cloned().fold(f64::MIN, f64::max);
            let lo = deficits.iter().cloned().fold(f64::MAX, f64::min);
            gap = gap.max(hi - lo);
        }
    }
    assert!(gap > 0.5, "entropy gap {gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prefixes_are_unaffected_by_later_tokens(tokens in prop::collection::vec(0u32..24, 6..16), cut in 1usize..6) {
        let m = Model::build(cfg(4, 2, 8)).unwrap();
        let full = m.forward(&tokens, &mut m.new_cache()).unwrap();
        let prefix = m.forward(&tokens[..cut], &mut m.new_cache()).unwrap();
        for r in 0..cut {
            for (a, b) in full.row(r).iter().zip(prefix.row(r)) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
