//! Plain-tensor entry points for primitives that are otherwise used through
//! a [`Graph`](crate::autograd::Graph).

use crate::autograd::Graph;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Layer normalization over the last dimension.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

/// Causal softmax over `[..., T, T]` scores.
pub fn causal_softmax<F: Scalar>(scores: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let y = g.causal_softmax(s, F::one())?;
    Ok(g.value(y).clone())
}

/// Mean token negative log-likelihood in nats.
pub fn cross_entropy_mean<F: Scalar>(logits: &Tensor<F>, targets: &[usize], ignore: Option<usize>) -> Result<F> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let y = g.cross_entropy(l, targets, ignore)?;
    Ok(g.value(y).data()[0])
}
