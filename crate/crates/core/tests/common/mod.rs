#![allow(dead_code)]

use xatl::data::{synthetic_text, TokenStream};
use xatl::{MixerKind, ModelConfig};

pub const CORPUS_BYTES: usize = 1 << 20;

/// The 1 MiB English-like corpus shared by the training tests.
pub fn corpus() -> TokenStream {
    TokenStream::from_bytes(&synthetic_text(CORPUS_BYTES, 0)).expect("corpus")
}

/// A two-layer `d = 16` model of one mixer kind.
pub fn small(kind: MixerKind) -> ModelConfig {
    let mut c = ModelConfig::preset("toy-mha").unwrap();
    c.d_model = 16;
    c.d_ff = 32;
    c.n_layers = 2;
    c.mixer_kinds = vec![kind; 2];
    c.n_heads = 2;
    c.retention_head_size = 8;
    c.max_seq_len = 32;
    c
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
