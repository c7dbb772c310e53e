use kvlab_core::calibration::resolve_scheme;
use kvlab_core::compressor::{CodecTable, CompressionScheme};
use kvlab_core::instrument::*;
use kvlab_core::linalg::random::gaussian_matrix;
use kvlab_core::model::data::uniform_stream;
use kvlab_core::model::{capture_calibration, Model, ModelConfig};
use kvlab_core::{seed, Matrix};

fn cfg(layers: usize) -> ModelConfig {
    ModelConfig { layers, query_heads: 4, kv_heads: 2, head_dim: 8, vocab: 32, max_seq: 24, mlp_hidden: 16, seed: 3 }
}

fn streams(n: usize, len: usize) -> Vec<Vec<u32>> {
    (0..n).map(|i| uniform_stream(32, len, 100 + i as u64)).collect()
}

fn codecs(model: &Model, scheme: &str) -> CodecTable {
    resolve_scheme(model.config(), &scheme.parse::<CompressionScheme>().unwrap(), None).unwrap()
}

#[test]
fn top1_and_gap_helpers() {
    assert_eq!(top1(&[0.1, 0.5, 0.5, 0.2]), 1);
    assert_eq!(top2_gap(&[3.0, 1.0, 2.5]), 0.5);
    assert_eq!(top2_gap(&[1.0]), f64::INFINITY);
    assert!(top1_flips(&[2.0, 1.0], &[0.0, 1.0]));
    assert!(!top1_flips(&[2.0, 1.0], &[1.5, 1.0]));
    assert!(gap_admits(0.01, 0.0));
    assert!(!gap_admits(0.01, 0.05));
    assert!(gap_admits(0.06, 0.05));
}

#[test]
fn compound_agreement_is_the_product() {
    assert!((compound_agreement(&[0.9, 0.9, 0.9]) - 0.729).abs() < 1e-15);
    assert_eq!(compound_agreement(&[]), 1.0);
}

#[test]
fn identity_compression_does_no_damage() {
    let m = Model::build(cfg(2)).unwrap();
    let s = streams(3, 20);
    let id = CodecTable::identity(2, 2);
    let r = damage_report(&m, &s, &id, DEFAULT_GAP_THRESHOLD).unwrap();
    assert_eq!(r.attention_kl.mean, 0.0);
    assert_eq!(r.flip_rate, 0.0);
    assert_eq!(r.gap_conditioned_flip_rate, 0.0);
    assert_eq!(r.ppl, r.ppl_identity);
    assert_eq!(r.per_layer_top1_agreement, vec![1.0, 1.0]);
    assert_eq!(r.compound_agreement, 1.0);
    assert_eq!(r.scheme, "identity");
}

#[test]
fn damage_shrinks_with_more_bits() {
    let m = Model::build(cfg(2)).unwrap();
    let s = streams(4, 24);
    let kl: Vec<f64> = ["kv=int2", "kv=int4", "kv=int8"]
        .iter()
        .map(|sc| attention_kl(&m, &s, &codecs(&m, sc)).unwrap().mean)
        .collect();
    assert!(kl[0] > kl[1] && kl[1] > kl[2] && kl[2] > 0.0, "{kl:?}");
    let f2 = flip_rate(&m, &s, &codecs(&m, "kv=int2"), 0.0).unwrap();
    let f8 = flip_rate(&m, &s, &codecs(&m, "kv=int8"), 0.0).unwrap();
    assert!(f2 >= f8);
}

#[test]
fn value_only_compression_leaves_first_layer_routing_intact() {
    // values never feed their own layer's scores, so layer 0 attention is untouched
    let m = Model::build(cfg(3)).unwrap();
    let s = streams(2, 16);
    let p = propagation_profile(&m, &s, &codecs(&m, "v=int2")).unwrap();
    assert_eq!(p.per_layer_agreement[0], 1.0);
    assert_eq!(p.per_layer_agreement.len(), 3);
    assert!((p.compound - compound_agreement(&p.per_layer_agreement)).abs() < 1e-15);
}

#[test]
fn gap_conditioning_never_increases_the_denominator() {
    let m = Model::build(cfg(2)).unwrap();
    let s = streams(3, 20);
    let t = codecs(&m, "k=int2");
    let d0 = sequence_damage(&m, &t, &s[0], 0.0).unwrap();
    let d1 = sequence_damage(&m, &t, &s[0], 0.5).unwrap();
    assert!(d1.gap_flips.1 <= d0.gap_flips.1);
    let total: usize = d0.flips_by_layer.iter().map(|x| x.1).sum();
    // every causal position of every layer and query head is a decision
    assert_eq!(total, 2 * 4 * 20);
    assert_eq!(d0.gap_flips.1, total);
}

#[test]
fn evaluation_rejects_bad_streams() {
    let m = Model::build(cfg(2)).unwrap();
    let id = CodecTable::identity(2, 2);
    assert!(attention_kl(&m, &[], &id).is_err());
    assert!(attention_kl(&m, &[vec![1]], &id).is_err());
    assert!(attention_kl(&m, &[vec![1; 25]], &id).is_err());
    assert!(propagation_profile(&Model::build(cfg(1)).unwrap(), &streams(1, 8), &id).is_err());
}

#[test]
fn spice_synthetic_toxicity_ranks_directions() {
    let metric = Matrix::from_diag(&[4.0, 2.0, 1.0, 0.0]);
    let values = gaussian_matrix(500, 4, &mut seed::rng(2, "spice"));
    // toxicity concentrated in the smallest-mass direction (axis 3)
    let tox = |d: &[f64]| Ok(d[3].powi(2) + 0.01 * d[0].powi(2));
    let e = spice_table_with(0, 1, &metric, &values, 1.0, tox).unwrap();
    assert_eq!(e.len(), 4);
    assert_eq!(e[0].mass, 4.0);
    assert!(e[3].spice.is_none(), "zero-mass direction has no spice");
    assert!(e[3].toxicity > e[0].toxicity);
    assert!(e.iter().all(|x| x.sd > 0.5 && x.sd < 1.5));
    let e0 = spice_table_with(0, 1, &metric, &values, 0.0, tox).unwrap();
    assert!(e0.iter().all(|x| x.toxicity == 0.0));
}

#[test]
fn spice_table_on_model_is_finite() {
    let m = Model::build(ModelConfig { layers: 1, ..cfg(1) }).unwrap();
    let s = streams(2, 12);
    let acts = capture_calibration(&m, &s).unwrap();
    let t = spice_table(&m, &acts, &s, 0.5).unwrap();
    assert_eq!(t.entries.len(), 2 * 8);
    assert!(t.entries.iter().all(|e| e.toxicity.is_finite() && e.toxicity >= 0.0));
    assert!(t.spearman.is_finite());
}
