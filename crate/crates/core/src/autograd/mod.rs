//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in exact reverse
//! order and accumulates input gradients in the order each op lists its
//! inputs, so the result is bit-reproducible.

pub(crate) mod ops;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::store::ParameterStore;
use crate::tensor::{Scalar, Tensor};

pub(crate) use ops::Op;
pub use ops::{rope_tables, ROTARY_BASE};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<String>,
}

pub struct Graph<F> {
    pub(crate) nodes: Vec<Node<F>>,
    consumed: bool,
}

/// Parameter name to graph handle, as produced by [`Graph::load_params`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter {
                name: name.to_string(),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }
}

/// Gradients keyed by parameter name, in lexicographic order.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    grads: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.grads.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<F>) {
        self.grads.insert(name.into(), grad);
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(name.into()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds every tensor of `store` as a leaf, trainable when `trainable`.
    pub fn load_params(&mut self, store: &ParameterStore<F>, trainable: bool) -> ParamVars {
        self.load_params_where(store, |_| trainable)
    }

    /// Like [`Graph::load_params`], with trainability decided per name.
    pub fn load_params_where(&mut self, store: &ParameterStore<F>, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let mut vars = ParamVars::default();
        for (name, t) in store.iter() {
            let v = if trainable(name) {
                self.param(name.clone(), t.clone())
            } else {
                self.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        vars
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`. One-shot: saved activations are
    /// released and a second call fails with [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::NotScalar { numel });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.dims()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(name) = &node.param {
                match out.grads.get_mut(name) {
                    Some(existing) => existing.add_assign(&gy),
                    None => {
                        out.grads.insert(name.clone(), gy);
                    }
                }
                continue;
            }
            for (input, g) in node.op.backward(&self.nodes, idx, &gy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for node in &mut self.nodes {
            node.op.release();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
