mod common;

use kvlab::config::{parse_scheme, random_basis_seed};
use kvlab::{ExperimentConfig, HarnessError};

#[test]
fn defaults_are_the_gqa_toy() {
    let c = ExperimentConfig::default();
    assert_eq!(c.seeds, vec![1, 2, 3]);
    assert_eq!((c.model.layers, c.model.query_heads, c.model.kv_heads, c.model.head_dim), (4, 4, 1, 32));
    c.validate().unwrap();
}

#[test]
fn toml_round_trips() {
    let c = common::small();
    let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
    assert_eq!(back.to_toml(), c.to_toml());
    assert_eq!(back.hash(), c.hash());
    let d = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::parse("").unwrap().to_toml(), d.to_toml());
}

#[test]
fn hash_ignores_seeds_and_out() {
    let a = common::small();
    let mut b = a.clone();
    b.seeds = vec![9];
    b.out = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.train.steps += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn unknown_fields_are_config_errors() {
    for text in ["bogus = 1", "[model]\nwidth = 3", "[nope]\n"] {
        let e = ExperimentConfig::parse(text).unwrap_err();
        assert!(matches!(e, HarnessError::Config(_)), "{text}: {e}");
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn matched_groups_share_a_budget() {
    let c = ExperimentConfig::default();
    let groups = c.matched_groups().unwrap();
    assert_eq!(groups.len(), 3);
    for (g, b) in groups.iter().zip([2usize, 4, 8]) {
        assert_eq!(g.check(32).unwrap(), 32 * b);
        assert_eq!(g.schemes.len(), 3);
    }
    assert_eq!(groups[1].schemes.iter().map(|s| s.to_string()).collect::<Vec<_>>(), ["v=int4", "v=rank8", "v=rank16-int8"]);
}

#[test]
fn mismatched_budget_is_rejected() {
    let e = ExperimentConfig::parse("[sweep]\nmatched = [[\"v=int4\", \"v=rank4\"]]\n").unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
    let e = ExperimentConfig::parse("[model]\nhead_dim = 12\n").unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

#[test]
fn joint_grid_has_nine_schemes() {
    let g = ExperimentConfig::default().joint_grid().unwrap();
    assert_eq!(g.len(), 9);
    assert!(g.iter().any(|s| s.to_string() == "k=int8 v=int4"));
}

#[test]
fn sweep_starts_with_identity() {
    let s = ExperimentConfig::default().sweep_schemes().unwrap();
    assert_eq!(s[0].to_string(), "identity");
    let names: Vec<String> = s.iter().map(|s| s.to_string()).collect();
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len());
}

#[test]
fn random_basis_seeds_differ_by_index() {
    assert_ne!(random_basis_seed(1, 0), random_basis_seed(1, 1));
    assert_ne!(random_basis_seed(1, 0), random_basis_seed(2, 0));
    assert_eq!(random_basis_seed(3, 4), random_basis_seed(3, 4));
}

#[test]
fn scheme_parse_errors_are_config_errors() {
    assert!(parse_scheme("v=int4").is_ok());
    assert_eq!(parse_scheme("v=zip3").unwrap_err().exit_code(), 2);
    let e = ExperimentConfig::parse("[sweep]\nschemes = [\"v=int99\"]\n").unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}
