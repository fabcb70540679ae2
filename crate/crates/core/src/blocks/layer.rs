use super::{
    ffn_forward, mha_forward, retention_parallel, ssm_block_forward, AttentionParams, FfnParams, Init, MixerKind,
    ParamSpec, ResidualStyle, RetentionParams, Scope, SsmConfig,
};
use crate::autograd::{Graph, ParamVars, Var};
use crate::error::Result;
use crate::tensor::Scalar;

/// Hyperparameters of the time-mixing block of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum MixerParams {
    Mha(AttentionParams),
    Retention(RetentionParams),
    Ssm(SsmConfig),
}

impl MixerParams {
    pub fn kind(&self) -> MixerKind {
        match self {
            MixerParams::Mha(_) => MixerKind::Mha,
            MixerParams::Retention(_) => MixerKind::Retention,
            MixerParams::Ssm(_) => MixerKind::Ssm,
        }
    }

    pub fn param_specs(&self, d: usize) -> Vec<ParamSpec> {
        match self {
            MixerParams::Mha(_) => AttentionParams::param_specs(d),
            MixerParams::Retention(_) => RetentionParams::param_specs(d),
            MixerParams::Ssm(cfg) => cfg.param_specs(d),
        }
    }
}

/// One pre-norm decoder layer: `ln1`, mixer under `mix`, `ln2`, FFN under
/// `ffn`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub mixer: MixerParams,
    pub ffn: FfnParams,
    pub style: ResidualStyle,
    pub ln_eps: f64,
}

impl LayerSpec {
    /// Parameter names relative to the layer prefix, e.g. `mix.wq`.
    pub fn param_specs(&self, d: usize) -> Vec<(String, ParamSpec)> {
        let mut out = Vec::new();
        for ln in ["ln1", "ln2"] {
            out.push((format!("{ln}.b"), ParamSpec::new("b", &[d], Init::Zeros)));
            out.push((format!("{ln}.g"), ParamSpec::new("g", &[d], Init::Ones)));
        }
        for s in self.mixer.param_specs(d) {
            out.push((format!("mix.{}", s.suffix), s));
        }
        for s in self.ffn.param_specs(d) {
            out.push((format!("ffn.{}", s.suffix), s));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// `h: [B, T, d] -> [B, T, d]` for the layer whose parameters live under
/// `prefix` (e.g. `layer.2`).
pub fn block_forward<F: Scalar>(g: &mut Graph<F>, h: Var, vars: &ParamVars, prefix: &str, spec: &LayerSpec) -> Result<Var> {
    let eps = F::lit(spec.ln_eps);
    let name = |s: &str| format!("{prefix}.{s}");
    let mix_prefix = name("mix");
    let ffn_prefix = name("ffn");

    let a = g.layer_norm(h, vars.get(&name("ln1.g"))?, vars.get(&name("ln1.b"))?, eps)?;
    let mix_scope = Scope::new(vars, &mix_prefix);
    let mixed = match &spec.mixer {
        MixerParams::Mha(p) => mha_forward(g, a, mix_scope, p)?,
        MixerParams::Retention(p) => retention_parallel(g, a, mix_scope, p)?,
        MixerParams::Ssm(p) => ssm_block_forward(g, a, mix_scope, p)?,
    };
    match spec.style {
        ResidualStyle::Sequential => {
            let o = g.add(h, mixed)?;
            let b = g.layer_norm(o, vars.get(&name("ln2.g"))?, vars.get(&name("ln2.b"))?, eps)?;
            let f = ffn_forward(g, b, Scope::new(vars, &ffn_prefix))?;
            g.add(o, f)
        }
        ResidualStyle::ParallelResidual => {
            let b = g.layer_norm(h, vars.get(&name("ln2.g"))?, vars.get(&name("ln2.b"))?, eps)?;
            let f = ffn_forward(g, b, Scope::new(vars, &ffn_prefix))?;
            let o = g.add(h, mixed)?;
            g.add(o, f)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::store::ParameterStore;
    use crate::tensor::Tensor;

    fn specs(d: usize) -> Vec<LayerSpec> {
        let mixers = vec![
            MixerParams::Mha(AttentionParams {
                n_heads: 2,
                rotary: true,
            }),
            MixerParams::Retention(RetentionParams::new(d, 4, true, 1e-5).unwrap()),
            MixerParams::Ssm(SsmConfig {
                n_state: 4,
                ..SsmConfig::default()
            }),
        ];
        let mut out = Vec::new();
        for mixer in mixers {
            for style in [ResidualStyle::Sequential, ResidualStyle::ParallelResidual] {
                out.push(LayerSpec {
                    mixer: mixer.clone(),
                    ffn: FfnParams { d_ff: 2 * d },
                    style,
                    ln_eps: 1e-5,
                });
            }
        }
        out
    }

    fn params(spec: &LayerSpec, d: usize, seed: u64) -> ParameterStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec.param_specs(d)
            .into_iter()
            .map(|(name, s)| {
                let t = match name.as_str() {
                    "mix.dt_bias" => Tensor::uniform(&s.dims, -2.0, 0.0, &mut rng),
                    _ => Tensor::normal(&s.dims, 0.3, &mut rng),
                };
                (format!("layer.0.{name}"), t)
            })
            .collect()
    }

    fn run(store: &ParameterStore<f64>, x: &Tensor<f64>, spec: &LayerSpec) -> Tensor<f64> {
        let mut g = Graph::new();
        let vars = g.load_params(store, false);
        let xv = g.constant(x.clone());
        let y = block_forward(&mut g, xv, &vars, "layer.0", spec).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[2, 5, d], -1.0, 1.0, &mut rng);
        for spec in specs(d) {
            let mut store = params(&spec, d, 1);
            let out_name = match spec.mixer {
                MixerParams::Ssm(_) => "layer.0.mix.out_proj",
                _ => "layer.0.mix.wo",
            };
            let dims = store.get(out_name).unwrap().dims().to_vec();
            *store.get_mut(out_name).unwrap() = Tensor::zeros(&dims);
            let dims = store.get("layer.0.ffn.w2").unwrap().dims().to_vec();
            *store.get_mut("layer.0.ffn.w2").unwrap() = Tensor::zeros(&dims);
            *store.get_mut("layer.0.ffn.b2").unwrap() = Tensor::zeros(&[d]);
            let y = run(&store, &x, &spec);
            assert!(y.bit_eq(&x), "{:?} {:?}", spec.mixer.kind(), spec.style);
        }
    }

    #[test]
    fn residual_styles_differ() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::uniform(&[1, 4, d], -1.0, 1.0, &mut rng);
        let all = specs(d);
        for pair in all.chunks(2) {
            let store = params(&pair[0], d, 2);
            let (a, b) = (run(&store, &x, &pair[0]), run(&store, &x, &pair[1]));
            assert!(a.max_abs_diff(&b) > 1e-6);
        }
    }

    #[test]
    fn gradients_pass_check() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(&[1, 4, d], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[1, 4, d], -1.0, 1.0, &mut rng);
        for spec in specs(d) {
            let store = params(&spec, d, 3);
            let f = |g: &mut Graph<f64>, vars: &ParamVars| {
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                let y = block_forward(g, xv, vars, "layer.0", &spec)?;
                let yw = g.mul(y, wv)?;
                g.sum(yw)
            };
            let cfg = GradCheckConfig {
                samples_per_tensor: 6,
                ..GradCheckConfig::default()
            };
            let report = grad_check(f, &store, &cfg).unwrap();
            assert!(report.max_rel_error <= 1e-6, "{:?}: {report:?}", spec.mixer.kind());
        }
    }
}
