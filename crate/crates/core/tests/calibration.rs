use kvlab_core::calibration::*;
use kvlab_core::compressor::{Basis, CompressionScheme, Paradigm, Side, SideCodec, Target};
use kvlab_core::linalg::random::{gaussian_matrix, random_psd};
use kvlab_core::linalg::{eigh_symmetric, random_orthonormal_with, subspace_overlap};
use kvlab_core::model::{capture_calibration, HeadActivations, Model, ModelConfig, Segment};
use kvlab_core::{seed, Matrix};
use rand::Rng;

fn acts(alpha: Matrix, values: Matrix) -> HeadActivations {
    acts_multi(vec![alpha], values)
}

fn acts_multi(alphas: Vec<Matrix>, values: Matrix) -> HeadActivations {
    let n = values.rows();
    let segment = Segment {
        tokens: vec![0; n],
        scores_per_query: alphas.iter().map(|a| Matrix::zeros(a.rows(), a.cols())).collect(),
        alpha_per_query: alphas,
        keys: values.clone(),
        values,
    };
    HeadActivations { layer: 0, kv_head: 0, segments: vec![segment] }
}

fn random_causal_alpha<R: Rng>(t: usize, rng: &mut R) -> Matrix {
    let mut a = Matrix::zeros(t, t);
    for r in 0..t {
        let w: Vec<f64> = (0..=r).map(|_| rng.random::<f64>().powi(4)).collect();
        let s: f64 = w.iter().sum();
        for (c, x) in w.iter().enumerate() {
            a[(r, c)] = x / s;
        }
    }
    a
}

fn one_hot_alpha(t: usize, target: impl Fn(usize) -> usize) -> Matrix {
    Matrix::from_fn(t, t, |r, c| if c == target(r) { 1.0 } else { 0.0 })
}

#[test]
fn pca_of_identity_rows_is_isotropic() {
    let m = metric_pca(&acts(Matrix::identity(5), Matrix::identity(5))).unwrap();
    assert!(m.m.max_abs_diff(&Matrix::identity(5).scale(0.2)) < 1e-15);
}

#[test]
fn pca_single_column_is_rank_one() {
    let v = Matrix::from_fn(10, 4, |r, c| if c == 2 { r as f64 - 3.0 } else { 0.0 });
    let m = metric_pca(&acts(Matrix::identity(10), v)).unwrap();
    let e = eigh_symmetric(&m.m).unwrap();
    assert!(e.eigenvalues[1].abs() < 1e-12);
    assert!((e.vector(0)[2].abs() - 1.0).abs() < 1e-12);
}

#[test]
fn pca_matches_naive_accumulation() {
    let mut rng = seed::rng(1, "pca");
    let v = gaussian_matrix(200, 16, &mut rng);
    let m = metric_pca(&acts(Matrix::identity(200), v.clone())).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            let mut s = 0.0;
            for t in 0..200 {
                s += v[(t, i)] * v[(t, j)];
            }
            assert!((m.m[(i, j)] - s / 200.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn empty_activations_are_rejected() {
    let empty = HeadActivations { layer: 0, kv_head: 0, segments: vec![] };
    assert!(metric_pca(&empty).is_err());
    assert!(metric_theorem(&acts(Matrix::identity(3), Matrix::identity(4))).is_err());
}

#[test]
fn theorem_reduces_to_pca_when_attention_is_identity() {
    let mut rng = seed::rng(2, "red");
    let v = gaussian_matrix(40, 8, &mut rng);
    let a = acts(Matrix::identity(40), v);
    let t = metric_theorem(&a).unwrap();
    let p = metric_pca(&a).unwrap();
    assert!(t.m.max_abs_diff(&p.m) <= 1e-12);
}

#[test]
fn theorem_with_all_mass_on_token_zero() {
    let mut rng = seed::rng(3, "t0");
    let v = gaussian_matrix(6, 4, &mut rng);
    let m = metric_theorem(&acts(one_hot_alpha(6, |_| 0), v.clone())).unwrap();
    let v0 = v.row_range(0, 1);
    assert!(m.m.max_abs_diff(&v0.gram()) <= 1e-12);
}

#[test]
fn theorem_basis_beats_sampled_subspaces() {
    let mut rng = seed::rng(4, "stiefel");
    for _ in 0..3 {
        let alpha = random_causal_alpha(32, &mut rng);
        let v = gaussian_matrix(32, 8, &mut rng);
        let m = metric_theorem(&acts(alpha.clone(), v.clone())).unwrap();
        let av = alpha.matmul(&v).unwrap();
        let loss = |p: &Matrix| {
            let proj = av.matmul(&p.matmul_t(p).unwrap()).unwrap();
            av.sub(&proj).unwrap().frobenius_norm().powi(2) / 32.0
        };
        for r in [1, 3, 5] {
            let best = loss(&basis_from_metric(&m, r).unwrap());
            for _ in 0..10_000 / 3 {
                let q = random_orthonormal_with(8, r, &mut rng).unwrap();
                assert!(best <= loss(&q) + 1e-9);
            }
        }
    }
}

#[test]
fn entropy_equals_theorem_for_one_hot_rows() {
    let mut rng = seed::rng(5, "ent");
    let v = gaussian_matrix(12, 6, &mut rng);
    let a = acts(one_hot_alpha(12, |r| r / 2), v);
    let e = metric_entropy(&a).unwrap();
    let t = metric_theorem(&a).unwrap();
    assert!(e.m.max_abs_diff(&t.m) <= 1e-12);
}

#[test]
fn entropy_of_uniform_rows_scales_by_inverse_length() {
    let mut rng = seed::rng(6, "uni");
    let v = gaussian_matrix(9, 5, &mut rng);
    let a = acts(Matrix::from_fn(9, 9, |_, _| 1.0 / 9.0), v);
    let e = metric_entropy(&a).unwrap();
    let t = metric_theorem(&a).unwrap();
    assert!(e.m.max_abs_diff(&t.m.scale(1.0 / 9.0)) <= 1e-12 * t.m.max_abs());
}

#[test]
fn entropy_matches_per_row_oracle() {
    let mut rng = seed::rng(7, "mix");
    let alpha = random_causal_alpha(10, &mut rng);
    let v = gaussian_matrix(10, 4, &mut rng);
    let e = metric_entropy(&acts(alpha.clone(), v.clone())).unwrap();
    let mut want = Matrix::zeros(4, 4);
    for t in 0..10 {
        let h: f64 = -alpha.row(t).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let y: Vec<f64> = (0..4).map(|c| (0..10).map(|s| alpha[(t, s)] * v[(s, c)]).sum()).collect();
        for i in 0..4 {
            for j in 0..4 {
                want[(i, j)] += (-h).exp() * y[i] * y[j] / 10.0;
            }
        }
    }
    assert!(e.m.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn kqsvd_reductions_and_product_oracle() {
    let mut rng = seed::rng(8, "kq");
    let v = gaussian_matrix(50, 6, &mut rng);
    let a = acts(Matrix::identity(50), v.clone());
    let pca = metric_pca(&a).unwrap();
    let k = metric_kqsvd(&a, &Matrix::identity(6)).unwrap();
    assert!(k.m.max_abs_diff(&pca.m) <= 1e-12);
    assert_eq!(metric_kqsvd(&a, &Matrix::zeros(6, 10)).unwrap().m.max_abs(), 0.0);
    assert!(metric_kqsvd(&a, &Matrix::zeros(5, 10)).is_err());

    let wo = gaussian_matrix(6, 10, &mut rng);
    let k = metric_kqsvd(&a, &wo).unwrap();
    let y = v.matmul(&wo).unwrap();
    let direct = eigh_symmetric(&y.gram().scale(1.0 / 50.0)).unwrap();
    let ours = eigh_symmetric(&k.m).unwrap();
    for i in 0..6 {
        assert!((ours.eigenvalues[i] - direct.eigenvalues[i]).abs() <= 1e-9 * direct.eigenvalues[0]);
    }
    assert!(direct.eigenvalues[6..].iter().all(|l| l.abs() <= 1e-9 * direct.eigenvalues[0]));
}

fn metric(m: Matrix, q: Option<usize>) -> MetricMatrix {
    MetricMatrix { kind: MetricKind::Theorem, m, provenance: Provenance { query_head: q, ..Provenance::default() } }
}

#[test]
fn aggregation_of_identical_metrics_is_the_metric() {
    let mut rng = seed::rng(9, "agg");
    let base = random_psd(6, &mut rng);
    for g in [1, 2, 4] {
        let ms: Vec<_> = (0..g).map(|i| metric(base.clone(), Some(i))).collect();
        for mode in [Aggregation::Arithmetic, Aggregation::Geometric, Aggregation::Harmonic] {
            let out = aggregate_gqa(&ms, mode).unwrap();
            assert!(out.m.max_abs_diff(&base) <= 1e-9, "{mode} g={g}: {}", out.m.max_abs_diff(&base));
        }
    }
}

#[test]
fn scalar_means() {
    let d = |x: f64| metric(Matrix::from_diag(&[x, x]), None);
    let close = |m: MetricMatrix, x: f64| m.m.max_abs_diff(&Matrix::from_diag(&[x, x])) <= 1e-12;
    assert!(close(aggregate_gqa(&[d(2.0), d(4.0)], Aggregation::Arithmetic).unwrap(), 3.0));
    assert!(close(aggregate_gqa(&[d(2.0), d(8.0)], Aggregation::Geometric).unwrap(), 4.0));
    assert!(close(aggregate_gqa(&[d(2.0), d(6.0)], Aggregation::Harmonic).unwrap(), 3.0));
    assert!(close(aggregate_gqa(&[d(1.0), d(8.0), d(27.0)], Aggregation::Geometric).unwrap(), 6.0));
}

#[test]
fn two_matrix_geometric_mean_is_the_riccati_solution() {
    let mut rng = seed::rng(10, "riccati");
    let a = random_psd(5, &mut rng).add(&Matrix::identity(5).scale(0.1)).unwrap();
    let b = random_psd(5, &mut rng).add(&Matrix::identity(5).scale(0.1)).unwrap();
    let g = aggregate_gqa(&[metric(a.clone(), Some(0)), metric(b.clone(), Some(1))], Aggregation::Geometric).unwrap().m;
    // G A⁻¹ G = B characterizes A # B.
    let a_inv = eigh_symmetric(&a).unwrap().map_spectrum(|l| 1.0 / l);
    let lhs = g.matmul(&a_inv).unwrap().matmul(&g).unwrap();
    assert!(lhs.max_abs_diff(&b) <= 1e-8 * b.max_abs());
}

#[test]
fn indefinite_input_names_its_head() {
    let good = metric(Matrix::identity(2), Some(0));
    let bad = metric(Matrix::from_diag(&[1.0, -0.5]), Some(3));
    for mode in [Aggregation::Geometric, Aggregation::Harmonic] {
        let err = aggregate_gqa(&[good.clone(), bad.clone()], mode).unwrap_err().to_string();
        assert!(err.contains("query_head 3"), "{err}");
    }
    assert!(aggregate_gqa(&[good, bad], Aggregation::Arithmetic).is_ok());
}

#[test]
fn basis_extraction() {
    let m = metric(Matrix::from_diag(&[3.0, 2.0, 1.0]), None);
    let p = basis_from_metric(&m, 2).unwrap();
    assert_eq!(p, Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap());
    let full = basis_from_metric(&m, 3).unwrap();
    assert!(full.gram().max_abs_diff(&Matrix::identity(3)) < 1e-12);
    assert!(basis_from_metric(&m, 0).is_err());
    assert!(basis_from_metric(&m, 4).is_err());

    let mut rng = seed::rng(11, "maxtrace");
    let psd = metric(random_psd(7, &mut rng), None);
    let p = basis_from_metric(&psd, 3).unwrap();
    let obj = |q: &Matrix| q.t_matmul(&psd.m.matmul(q).unwrap()).unwrap().trace();
    let best = obj(&p);
    for _ in 0..10_000 {
        let q = random_orthonormal_with(7, 3, &mut rng).unwrap();
        assert!(obj(&q) <= best + 1e-9);
    }
}

#[test]
fn metrics_scale_quadratically_and_bases_do_not_move() {
    let mut rng = seed::rng(12, "scale");
    let alpha = random_causal_alpha(16, &mut rng);
    let v = gaussian_matrix(16, 6, &mut rng);
    let a1 = acts(alpha.clone(), v.clone());
    let a2 = acts(alpha, v.scale(3.0));
    for f in [metric_pca, metric_theorem, metric_entropy] {
        let (m1, m2) = (f(&a1).unwrap(), f(&a2).unwrap());
        assert!(m2.m.max_abs_diff(&m1.m.scale(9.0)) <= 1e-12 * m2.m.max_abs());
        let (p1, p2) = (basis_from_metric(&m1, 2).unwrap(), basis_from_metric(&m2, 2).unwrap());
        assert!((subspace_overlap(&p1, &p2) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn per_query_metrics_average_to_the_arithmetic_aggregate() {
    let mut rng = seed::rng(13, "gqa");
    let alphas: Vec<Matrix> = (0..3).map(|_| random_causal_alpha(8, &mut rng)).collect();
    let v = gaussian_matrix(8, 4, &mut rng);
    let a = acts_multi(alphas, v);
    let per = metrics_per_query_head(&a, MetricKind::Theorem).unwrap();
    assert_eq!(per.len(), 3);
    assert_eq!(per[2].provenance.query_head, Some(2));
    let agg = aggregate_gqa(&per, Aggregation::Arithmetic).unwrap();
    let manual = per[0].m.add(&per[1].m).unwrap().add(&per[2].m).unwrap().scale(1.0 / 3.0);
    assert!(agg.m.max_abs_diff(&manual) <= 1e-15);
    assert_eq!(agg.provenance.query_head, None);
}

fn toy() -> Model {
    Model::build(ModelConfig { layers: 2, query_heads: 4, kv_heads: 2, head_dim: 8, vocab: 16, max_seq: 12, mlp_hidden: 0, seed: 5 })
        .unwrap()
}

fn toy_bundle(m: &Model) -> MetricBundle {
    let streams: Vec<Vec<u32>> = (0..3).map(|s| (0..12).map(|i| ((i * 3 + s) % 16) as u32).collect()).collect();
    let acts = capture_calibration(m, &streams).unwrap();
    let req: Vec<(Side, MetricKind)> = MetricKind::ALL
        .iter()
        .map(|&k| (Side::Value, k))
        .chain([(Side::Key, MetricKind::Pca)])
        .collect();
    build_metrics(m, &acts, &req, Aggregation::AlphaMean, "abc").unwrap()
}

#[test]
fn bundle_round_trip_and_lookup() {
    let m = toy();
    let b = toy_bundle(&m);
    assert_eq!(b.metrics.len(), 5 * 2 * 2);
    assert!(b.get(Side::Value, MetricKind::Theorem, 1, 1).is_some());
    assert!(b.get(Side::Key, MetricKind::Theorem, 0, 0).is_none());
    let bytes = b.to_bytes();
    let back = MetricBundle::from_bytes(&bytes).unwrap();
    assert_eq!(back, b);
    assert!(MetricBundle::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    for mm in &b.metrics {
        if mm.kind.expects_psd() {
            assert!(mm.is_psd().unwrap());
        }
        assert_eq!(mm.provenance.sequences, 3);
    }
}

#[test]
fn resolution_follows_the_scheme() {
    let m = toy();
    let cfg = *m.config();
    let b = toy_bundle(&m);

    let t = resolve_scheme(&cfg, &CompressionScheme::quantize_v(4), None).unwrap();
    assert!(matches!(t.values[1][1], SideCodec::Quantize { bits: 4, rotation: None }));
    assert!(t.keys[1][1].is_identity());

    assert!(resolve_scheme(&cfg, &CompressionScheme::project_v(2), None).is_err());
    let t = resolve_scheme(&cfg, &CompressionScheme::project_v(2).with_exempt([0]), Some(&b)).unwrap();
    assert!(t.values[0][0].is_identity() && t.values[0][1].is_identity());
    let want = basis_from_metric(b.get(Side::Value, MetricKind::Theorem, 1, 0).unwrap(), 2).unwrap();
    assert_eq!(t.values[1][0], SideCodec::Project { basis: want });

    let s = CompressionScheme::quantize_v(4).with_basis(Basis::Random(3));
    let t1 = resolve_scheme(&cfg, &s, None).unwrap();
    let t2 = resolve_scheme(&cfg, &s, None).unwrap();
    assert_eq!(t1, t2);
    match &t1.values[0][0] {
        SideCodec::Quantize { rotation: Some(q), .. } => assert_eq!(q.shape(), (8, 8)),
        other => panic!("{other:?}"),
    }
    assert_ne!(t1.values[0][0], t1.values[0][1]);

    let k = CompressionScheme::new(Target::K, Paradigm::Project { rank: 4 }, Some(Basis::Theorem));
    assert!(resolve_scheme(&cfg, &k, Some(&b)).is_err());
    let k = CompressionScheme::new(Target::K, Paradigm::Project { rank: 4 }, None);
    let t = resolve_scheme(&cfg, &k, Some(&b)).unwrap();
    assert!(matches!(t.keys[0][0], SideCodec::Project { .. }));

    let orig = CompressionScheme::project_v(3).with_basis(Basis::Original);
    let t = resolve_scheme(&cfg, &orig, Some(&b)).unwrap();
    match &t.values[0][0] {
        SideCodec::Project { basis } => {
            assert!(basis.as_slice().iter().all(|&x| x == 0.0 || x == 1.0));
            assert_eq!(basis.as_slice().iter().sum::<f64>(), 3.0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn aggregation_modes_agree_for_mha() {
    let m = Model::build(ModelConfig { layers: 1, query_heads: 2, kv_heads: 2, head_dim: 8, vocab: 16, max_seq: 12, mlp_hidden: 0, seed: 9 })
        .unwrap();
    let acts = capture_calibration(&m, &[(0..12).collect()]).unwrap();
    let req = [(Side::Value, MetricKind::Theorem)];
    let base = build_metrics(&m, &acts, &req, Aggregation::AlphaMean, "").unwrap();
    for mode in [Aggregation::Arithmetic, Aggregation::Geometric, Aggregation::Harmonic] {
        let other = build_metrics(&m, &acts, &req, mode, "").unwrap();
        for (a, b) in base.metrics.iter().zip(&other.metrics) {
            assert!(a.m.max_abs_diff(&b.m) <= 1e-9 * a.m.max_abs().max(1.0));
        }
    }
}
