use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Heavy-ball coefficient for SGD.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Decoupled decay: each step subtracts `lr · weight_decay · p`.
    pub weight_decay: f64,
    /// Parameter roles that never receive weight decay.
    pub decay_exclusions: Vec<Role>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 5e-4,
            decay_exclusions: vec![Role::Bias, Role::BnGamma, Role::BnBeta],
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    pub fn decays(&self, role: Role) -> bool {
        !self.decay_exclusions.contains(&role)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Stateful optimizer; moment buffers are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn apply_update(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads.iter() {
            let p = store.get_mut(name)?;
            if p.value.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter `{name}` of shape {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            let decay = if c.decays(p.role) { c.weight_decay } else { 0.0 };
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.numel()],
                second: match c.kind {
                    OptimizerKind::Adam => vec![0.0; g.numel()],
                    OptimizerKind::SgdMomentum => Vec::new(),
                },
            });
            let values = p.value.data_mut();
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, &gi), v) in values.iter_mut().zip(g.data()).zip(&mut m.first) {
                        *v = c.momentum * *v + gi;
                        *w -= c.learning_rate * (*v + decay * *w);
                    }
                }
                OptimizerKind::Adam => {
                    for (((w, &gi), m1), m2) in values
                        .iter_mut()
                        .zip(g.data())
                        .zip(&mut m.first)
                        .zip(&mut m.second)
                    {
                        *m1 = c.beta1 * *m1 + (1.0 - c.beta1) * gi;
                        *m2 = c.beta2 * *m2 + (1.0 - c.beta2) * gi * gi;
                        let step = (*m1 / bc1) / ((*m2 / bc2).sqrt() + c.adam_epsilon);
                        *w -= c.learning_rate * (step + decay * *w);
                    }
                }
            }
            p.value.ensure_finite("optimizer update")?;
        }
        Ok(())
    }
}
