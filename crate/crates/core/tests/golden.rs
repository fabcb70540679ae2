//! Pins the logits of small fixed-seed models. Set `XATL_BLESS=1` to
//! rewrite the reference file after an intentional numerical change.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use xatl::model::{build_model, logits};
use xatl::MixerKind;

const TOLERANCE: f64 = 1e-5;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_logits.json")
}

fn current() -> BTreeMap<String, Vec<f32>> {
    let tokens: Vec<usize> = b"Pin me, twice!".iter().map(|&b| b as usize).collect();
    let (b, t) = (2, tokens.len() / 2);
    let mut out = BTreeMap::new();
    for kind in [MixerKind::Mha, MixerKind::Retention, MixerKind::Ssm] {
        let cfg = common::small(kind);
        let store = build_model::<f32>(&cfg, 7).unwrap();
        let y = logits(&store, &cfg, &tokens, b, t).unwrap();
        // The last position of each row, first 32 vocabulary entries.
        let v = cfg.vocab_size;
        let data = y.data();
        let mut pinned = Vec::new();
        for row in 0..b {
            let at = (row * t + t - 1) * v;
            pinned.extend_from_slice(&data[at..at + 32]);
        }
        out.insert(kind.name().to_string(), pinned);
    }
    out
}

#[test]
fn logits_match_pinned_values() {
    let now = current();
    let path = golden_path();
    if std::env::var_os("XATL_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&now).unwrap()).unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).expect("golden file; run with XATL_BLESS=1 to create it");
    let pinned: BTreeMap<String, Vec<f32>> = serde_json::from_str(&text).unwrap();
    assert_eq!(pinned.keys().collect::<Vec<_>>(), now.keys().collect::<Vec<_>>());
    for (kind, want) in &pinned {
        let got = &now[kind];
        assert_eq!(got.len(), want.len(), "{kind}");
        for (i, (a, b)) in got.iter().zip(want).enumerate() {
            let err = (*a as f64 - *b as f64).abs();
            assert!(err <= TOLERANCE, "{kind}[{i}]: {a} vs pinned {b}");
        }
    }
}
