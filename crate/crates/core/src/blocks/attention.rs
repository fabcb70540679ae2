use super::{Init, ParamSpec, Scope};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Causal multi-head softmax attention with output projection `wo`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub rotary: bool,
}

impl AttentionParams {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by n_heads {}",
                self.n_heads
            )));
        }
        if self.rotary && (d / self.n_heads) % 2 != 0 {
            return Err(Error::Config("rotary needs an even head dimension".into()));
        }
        Ok(())
    }

    pub fn param_specs(d: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("wk", &[d, d], Init::Normal),
            ParamSpec::new("wo", &[d, d], Init::ResidualOut),
            ParamSpec::new("wq", &[d, d], Init::Normal),
            ParamSpec::new("wv", &[d, d], Init::Normal),
        ]
    }
}

/// `x: [B, T, d] -> [B, T, d]`; position `t` only attends to `0..=t`.
pub fn mha_forward<F: Scalar>(g: &mut Graph<F>, x: Var, p: Scope<'_>, hp: &AttentionParams) -> Result<Var> {
    if g.dims(x).len() != 3 {
        return Err(Error::shape("mha_forward", format!("input {:?} is not [B,T,d]", g.dims(x))));
    }
    let d = g.dims(x)[2];
    hp.validate(d)?;
    let dh = d / hp.n_heads;

    let q = g.matmul(x, p.get("wq")?, false)?;
    let k = g.matmul(x, p.get("wk")?, false)?;
    let v = g.matmul(x, p.get("wv")?, false)?;
    let mut q = g.split_heads(q, hp.n_heads)?;
    let mut k = g.split_heads(k, hp.n_heads)?;
    let v = g.split_heads(v, hp.n_heads)?;
    if hp.rotary {
        q = g.rotary(q, 0)?;
        k = g.rotary(k, 0)?;
    }
    let scores = g.batched_matmul(q, k, true)?;
    let probs = g.causal_softmax(scores, F::lit(1.0 / (dh as f64).sqrt()))?;
    let heads = g.batched_matmul(probs, v, false)?;
    let merged = g.merge_heads(heads)?;
    g.matmul(merged, p.get("wo")?, false)
}
