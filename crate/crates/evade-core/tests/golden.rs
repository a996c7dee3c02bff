//! Golden-file regression tests: freeze the forward pass of seeded models
//! so silent changes to initialization order or layer semantics show up as
//! diffs against committed fixtures.
//!
//! Regenerate with: REGEN_FIXTURES=1 cargo test -p evade-core --test golden

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use evade_core::nn::Tensor2;
use evade_core::representation::{EncoderConfig, EncoderModel};

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn check_against_fixture(name: &str, values: &[f64]) {
    let path = fixture_path(name);
    if std::env::var("REGEN_FIXTURES").is_ok() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(values).unwrap()).unwrap();
        eprintln!("regenerated {}", path.display());
        return;
    }
    let body = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing fixture {} ({e}); regenerate with REGEN_FIXTURES=1", path.display()));
    let expected: Vec<f64> = serde_json::from_str(&body).unwrap();
    assert_eq!(expected.len(), values.len(), "fixture length changed");
    for (i, (e, v)) in expected.iter().zip(values).enumerate() {
        assert!(
            (e - v).abs() <= 1e-12,
            "entry {i}: fixture {e:.17} vs computed {v:.17}"
        );
    }
}

#[test]
fn encoder_forward_trace_matches_fixture() {
    let cfg = EncoderConfig {
        hidden1: 8,
        hidden2: 4,
        embed_dim: 3,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = EncoderModel::new(6, &cfg, &mut rng);
    let x = Tensor2::from_vec(
        2,
        6,
        vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0],
    )
    .unwrap();
    let e = model.embed(&x).unwrap();
    check_against_fixture("encoder_trace.json", e.as_slice());
}
