//! Neural building blocks: activations, dense layers, (conditional) batch
//! normalization and the residual convolutional backbone.

mod backbone;
mod norm;

pub use backbone::{Backbone, BackboneConfig, BackboneOutput, BnLayer, ModulationDeltas, Pool};
pub use norm::{
    batch_norm, bn_forward, conditional_batch_norm, update_running, BatchNormState, Mode,
    DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Selu,
    Silu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Selu => g.selu(x),
            Activation::Silu => g.silu(x),
        }
    }

    /// He-style init gain for weights feeding this activation.
    fn init_gain(self) -> f64 {
        match self {
            Activation::Selu => 1.0,
            Activation::Relu | Activation::Silu => 2.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Selu => "selu",
            Activation::Silu => "silu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "selu" => Ok(Activation::Selu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Elementwise activation on a plain tensor.
pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = kind.apply(&mut g, v)?;
    Ok(g.value(y).clone())
}

/// Fully connected layer `x·W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    /// Registers parameters; `gain` scales the variance `gain / input`, and a
    /// gain of zero gives an all-zero layer.
    pub fn init(&self, store: &mut ParamStore, gain: f64, rng: &mut SeededRng) {
        let std = (gain / self.input as f64).sqrt();
        store.insert(
            self.weight_name(),
            Tensor::randn(&[self.input, self.output], std, rng),
            Role::Weight,
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.output]), Role::Bias);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.input {
            return Err(Error::shape(format!(
                "{} expects {} inputs, got {d}",
                self.prefix, self.input
            )));
        }
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}
