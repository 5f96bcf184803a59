//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation records its output value and a closure mapping the output
//! gradient to parent gradients. Nodes whose parents are all constant carry no
//! closure, so frozen sub-graphs cost only their forward pass.

mod loss;
mod nn;
mod ops;

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub use loss::PROB_FLOOR;
pub(crate) use loss::{logistic_bin, sigmoid};
pub use nn::{attention_weights, AttentionWindow};
pub use ops::round_half_away;

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let loss_value = &self.nodes[loss.0].value;
        assert_eq!(loss_value.len(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(f) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = f(&g, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// A graph bound to one or more parameter sets.
///
/// Parameters become leaves lazily the first time they are requested, so
/// gradients are only tracked for parameters that participate in the forward
/// pass. A parameter requires a gradient iff the session is in training mode
/// and the parameter is not frozen.
pub struct Session<'p> {
    graph: Graph,
    sets: Vec<&'p ParameterSet>,
    bound: HashMap<String, Var>,
    train: bool,
}

impl<'p> Session<'p> {
    pub fn new(sets: &[&'p ParameterSet], train: bool) -> Self {
        Self {
            graph: Graph::new(),
            sets: sets.to_vec(),
            bound: HashMap::new(),
            train,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Looks up a parameter by path. Panics on an unknown path: model code
    /// and parameter construction are generated from the same config.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let (value, frozen) = self
            .sets
            .iter()
            .find_map(|s| s.get(name).map(|t| (t.clone(), s.is_frozen(name))))
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = self.graph.leaf(value, self.train && !frozen);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.sets.iter().any(|s| s.get(name).is_some())
    }

    /// Gradients for every bound, trainable parameter.
    pub fn param_grads(&self, loss: Var) -> HashMap<String, Tensor> {
        let grads = self.graph.backward(loss);
        self.bound
            .iter()
            .filter(|(_, v)| self.graph.requires_grad(**v))
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }
}

impl Deref for Session<'_> {
    type Target = Graph;
    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference checking used by the op and model tests.
    use super::*;

    /// Largest relative error between the analytic gradient of `f` at `x` and
    /// central differences, over every coordinate of `x`.
    pub fn check<F>(x: &Tensor, eps: f64, f: F) -> f64
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let out = f(&mut g, xv);
        let grads = g.backward(out);
        let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.leaf(t, false);
            let o = f(&mut g, v);
            g.value(o).item()
        };
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
        worst
    }
}
