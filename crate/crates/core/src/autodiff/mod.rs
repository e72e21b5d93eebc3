//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, which is a topological order, so [`Graph::backward`]
//! simply walks the node list in reverse.
//!
//! ```
//! use bridgelab::autodiff::Graph;
//! use bridgelab::params::{ParamStore, Role};
//! use bridgelab::tensor::Tensor;
//!
//! let mut store = ParamStore::new();
//! store.insert("x", Tensor::scalar(3.0), Role::Weight);
//! let mut g = Graph::new();
//! let x = g.param(&store, "x").unwrap();
//! let y = g.mul(x, x).unwrap();
//! assert_eq!(g.value(y).item().unwrap(), 9.0);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get("x").unwrap().item().unwrap(), 6.0);
//! ```

mod gradcheck;
mod ops;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::BatchStats;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Deliberate defects for exercising the gradient-check harness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Drops the mean-correction term from the batch-norm input gradient.
    pub corrupt_bn_backward: bool,
}

pub(crate) struct Node {
    value: Tensor,
    op: ops::Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<(String, Var)>,
    kink_signature: u64,
    faults: Faults,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_faults(faults: Faults) -> Self {
        Self {
            faults,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of every non-smooth branch taken (ReLU signs, max-pool winners).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    fn push(&mut self, value: Tensor, op: ops::Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input. Receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, ops::Op::Leaf)
    }

    /// Binds the named parameter of `store`; binding the same name twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = store.get(name)?.value.clone();
        let v = self.push(value, ops::Op::Leaf);
        self.bound.push((name.to_string(), v));
        Ok(v)
    }

    /// A copy of `x` that blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, ops::Op::Leaf)
    }

    /// Gradients of the scalar `output` with respect to every bound parameter.
    /// Parameters not on a path to `output` get exact zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (input, contrib) in ops::backward(self, &node.op, &node.value, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Leaves keep their gradient for collection below.
            if matches!(node.op, ops::Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut map = BTreeMap::new();
        for (name, v) in &self.bound {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
