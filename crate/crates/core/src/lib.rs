//! Few-shot prototypical networks whose batch-norm layers can be modulated
//! by a bridge network fed from an auxiliary attribute/caption predictor,
//! together with the baseline and ablation variants and a paired,
//! seed-swept evaluation protocol.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fewshot;
pub mod layers;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
