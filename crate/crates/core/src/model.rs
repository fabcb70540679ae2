//! Decoder language models assembled from a [`ModelConfig`].
//!
//! Canonical parameter names:
//!
//! ```text
//! embed.in  embed.out  final_ln.{g,b}
//! layer.{i}.ln1.{g,b}  layer.{i}.mix.*  layer.{i}.ln2.{g,b}  layer.{i}.ffn.{w1,b1,w2,b2}
//! ```
//!
//! With tied embeddings `embed.out` is absent and the output head reads
//! `embed.in`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamVars, Var};
use crate::blocks::{block_forward, AttentionParams, FfnParams, Init, LayerSpec, MixerParams, RetentionParams};
pub use crate::blocks::{MixerKind, ResidualStyle, SsmConfig};
use crate::error::{Error, Result};
use crate::store::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the default normal initializer.
pub const INIT_STD: f64 = 0.02;

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    crate::ops::DEFAULT_LN_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub mixer_kinds: Vec<MixerKind>,
    pub residual_style: ResidualStyle,
    pub n_heads: usize,
    pub retention_head_size: usize,
    #[serde(default)]
    pub ssm: SsmConfig,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_true")]
    pub rotary: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: &[&str] = &[
    "pythia-410m",
    "retnet-430m",
    "stripedmamba-430m",
    "pythia-1b",
    "retnet-1b",
    "toy-mha",
    "toy-retention",
    "toy-ssm",
    "toy-hybrid-retention",
];

impl ModelConfig {
    fn uniform(kind: MixerKind, vocab: usize, d: usize, d_ff: usize, layers: usize, heads: usize, head_size: usize) -> Self {
        ModelConfig {
            vocab_size: vocab,
            d_model: d,
            d_ff,
            n_layers: layers,
            mixer_kinds: vec![kind; layers],
            residual_style: ResidualStyle::ParallelResidual,
            n_heads: heads,
            retention_head_size: head_size,
            ssm: SsmConfig::default(),
            max_seq_len: 2048,
            tie_embeddings: false,
            rotary: true,
            ln_eps: default_ln_eps(),
        }
    }

    /// Full-scale size configurations and the byte-level toy models used for
    /// desk-scale experiments.
    pub fn preset(name: &str) -> Result<Self> {
        const VOCAB: usize = 50304;
        const TOY_VOCAB: usize = crate::data::VOCAB_SIZE;
        let toy = |kind| {
            let mut c = Self::uniform(kind, TOY_VOCAB, 128, 512, 4, 4, 32);
            c.max_seq_len = 256;
            c
        };
        Ok(match name {
            "pythia-410m" => Self::uniform(MixerKind::Mha, VOCAB, 1024, 4096, 24, 16, 256),
            "retnet-430m" => Self::uniform(MixerKind::Retention, VOCAB, 1024, 4096, 24, 4, 256),
            "stripedmamba-430m" => Self::uniform(MixerKind::Ssm, VOCAB, 1024, 4096, 24, 16, 256),
            "pythia-1b" => Self::uniform(MixerKind::Mha, VOCAB, 2048, 8192, 16, 8, 256),
            "retnet-1b" => Self::uniform(MixerKind::Retention, VOCAB, 2048, 8192, 16, 8, 256),
            "toy-mha" => toy(MixerKind::Mha),
            "toy-retention" => toy(MixerKind::Retention),
            "toy-ssm" => toy(MixerKind::Ssm),
            "toy-hybrid-retention" => make_hybrid(&toy(MixerKind::Retention))?,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, d_model, d_ff and max_seq_len must be positive".into());
        }
        if self.mixer_kinds.len() != self.n_layers {
            return bad(format!(
                "mixer_kinds has {} entries for {} layers",
                self.mixer_kinds.len(),
                self.n_layers
            ));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return bad(format!("ln_eps {} must be finite and non-negative", self.ln_eps));
        }
        for i in 0..self.n_layers {
            match self.mixer_params(i)? {
                MixerParams::Mha(p) => p.validate(self.d_model)?,
                MixerParams::Retention(p) => p.validate(self.d_model)?,
                MixerParams::Ssm(p) => p.validate()?,
            }
        }
        Ok(())
    }

    fn mixer_params(&self, layer: usize) -> Result<MixerParams> {
        Ok(match self.mixer_kinds[layer] {
            MixerKind::Mha => MixerParams::Mha(AttentionParams {
                n_heads: self.n_heads,
                rotary: self.rotary,
            }),
            MixerKind::Retention => MixerParams::Retention(RetentionParams::new(
                self.d_model,
                self.retention_head_size,
                self.rotary,
                self.ln_eps,
            )?),
            MixerKind::Ssm => MixerParams::Ssm(self.ssm.clone()),
        })
    }

    /// Block hyperparameters for 0-based layer `layer`.
    pub fn layer_spec(&self, layer: usize) -> Result<LayerSpec> {
        if layer >= self.n_layers {
            return Err(Error::Config(format!("layer {layer} out of range for {} layers", self.n_layers)));
        }
        Ok(LayerSpec {
            mixer: self.mixer_params(layer)?,
            ffn: FfnParams { d_ff: self.d_ff },
            style: self.residual_style,
            ln_eps: self.ln_eps,
        })
    }

    /// Every canonical parameter with its shape and initializer, sorted by
    /// name.
    pub fn parameter_specs(&self) -> Result<Vec<(String, Vec<usize>, Init)>> {
        self.validate()?;
        let (v, d) = (self.vocab_size, self.d_model);
        let mut out = vec![
            ("embed.in".to_string(), vec![v, d], Init::Normal),
            ("final_ln.b".to_string(), vec![d], Init::Zeros),
            ("final_ln.g".to_string(), vec![d], Init::Ones),
        ];
        if !self.tie_embeddings {
            out.push(("embed.out".to_string(), vec![v, d], Init::Normal));
        }
        for i in 0..self.n_layers {
            for (suffix, s) in self.layer_spec(i)?.param_specs(d) {
                out.push((format!("layer.{i}.{suffix}"), s.dims, s.init));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Canonical names and shapes, sorted by name.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(self.parameter_specs()?.into_iter().map(|(n, s, _)| (n, s)).collect())
    }

    pub fn output_table(&self) -> &'static str {
        if self.tie_embeddings {
            "embed.in"
        } else {
            "embed.out"
        }
    }

    pub fn is_hybrid(&self) -> bool {
        self.mixer_kinds.contains(&MixerKind::Mha) && self.mixer_kinds.iter().any(|&k| k != MixerKind::Mha)
    }
}

/// 1-based layers that receive full attention in a hybrid stack:
/// `{2, n_layers / 2}`.
pub fn hybrid_layer_indices(n_layers: usize) -> Result<BTreeSet<usize>> {
    if n_layers < 2 {
        return Err(Error::Config(format!("hybrid placement needs at least 2 layers, got {n_layers}")));
    }
    Ok([2, n_layers / 2].into_iter().collect())
}

/// Replace the mixer at every hybrid index with softmax attention.
pub fn make_hybrid(config: &ModelConfig) -> Result<ModelConfig> {
    let base = match config.mixer_kinds.first() {
        Some(&k) if config.mixer_kinds.iter().all(|&m| m == k) => k,
        Some(_) => return Err(Error::Config("base config already mixes layer kinds".into())),
        None => return Err(Error::Config("cannot hybridize a model without layers".into())),
    };
    if base == MixerKind::Mha {
        return Err(Error::Config("hybrid base kind must be retention or ssm".into()));
    }
    let mut out = config.clone();
    for i in hybrid_layer_indices(config.n_layers)? {
        out.mixer_kinds[i - 1] = MixerKind::Mha;
    }
    out.validate()?;
    Ok(out)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a: stable across platforms and releases, unlike `DefaultHasher`.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-tensor generator so a tensor's initial value depends only on
/// `(seed, name)`, not on which other tensors exist.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&name_hash(name).to_le_bytes());
    ChaCha8Rng::from_seed(s)
}

fn init_tensor<F: Scalar>(dims: &[usize], init: Init, n_layers: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    match init {
        Init::Normal => Tensor::normal(dims, INIT_STD, rng),
        Init::ResidualOut => Tensor::normal(dims, INIT_STD / ((2 * n_layers.max(1)) as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(dims),
        Init::Ones => Tensor::ones(dims),
        Init::Uniform(a) => Tensor::uniform(dims, -a, a, rng),
        Init::StateLog => {
            let n = dims[1];
            let row: Vec<f64> = (0..n).map(|j| ((j + 1) as f64).ln()).collect();
            let data: Vec<f64> = row.iter().cycle().take(dims[0] * n).copied().collect();
            Tensor::from_f64(dims, &data).expect("dims match")
        }
        Init::DtBias { lo, hi } => {
            let dist = Uniform::new_inclusive(lo.ln(), hi.ln()).expect("lo <= hi");
            let data: Vec<f64> = (0..dims.iter().product())
                .map(|_| {
                    let dt = dist.sample(rng).exp();
                    // inverse softplus
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect();
            Tensor::from_f64(dims, &data).expect("dims match")
        }
    }
}

/// Freshly initialized parameters for `config`. Deterministic in `seed`.
pub fn build_model<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterStore<F>> {
    let specs = config.parameter_specs()?;
    Ok(specs
        .into_iter()
        .map(|(name, dims, init)| {
            let mut rng = tensor_rng(seed, &name);
            let t = init_tensor(&dims, init, config.n_layers, &mut rng);
            (name, t)
        })
        .collect())
}

/// Record the model on `g`; returns logits `[B, T, V]`.
pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    vars: &ParamVars,
    config: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if seq > config.max_seq_len {
        return Err(Error::Config(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let mut h = g.embedding(vars.get("embed.in")?, tokens, &[batch, seq])?;
    for i in 0..config.n_layers {
        h = block_forward(g, h, vars, &format!("layer.{i}"), &config.layer_spec(i)?)?;
    }
    let h = g.layer_norm(
        h,
        vars.get("final_ln.g")?,
        vars.get("final_ln.b")?,
        F::lit(config.ln_eps),
    )?;
    g.matmul(h, vars.get(config.output_table())?, true)
}

/// Inference-only logits `[B, T, V]`.
pub fn logits<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let vars = g.load_params(store, false);
    let y = forward(&mut g, &vars, config, tokens, batch, seq)?;
    Ok(g.value(y).clone())
}

/// Mean next-token cross-entropy (nats) of `inputs -> targets`, ignoring
/// `ignore` targets.
pub fn loss<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
    ignore: Option<usize>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = g.load_params(store, false);
    let y = forward(&mut g, &vars, config, inputs, batch, seq)?;
    let l = g.cross_entropy(y, targets, ignore)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Greedy continuation of `prompt` by `n` tokens, recomputing the full
/// prefix each step. Intended for smoke tests.
pub fn greedy_generate<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    prompt: &[usize],
    n: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let start = seq.len().saturating_sub(config.max_seq_len);
        let window = &seq[start..];
        let out = logits(store, config, window, 1, window.len())?;
        let v = config.vocab_size;
        let last = &out.data()[(window.len() - 1) * v..];
        let next = last
            .iter()
            .enumerate()
            .fold((0, F::neg_infinity()), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0;
        seq.push(next);
    }
    Ok(seq)
}
