use std::fmt::Write as _;

use super::eval::{evaluate, EvalConfig};
use super::optimizer::{Optimizer, OptimizerConfig};
use crate::autodiff::Graph;
use crate::data::{MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::fewshot::{check_split, sample_episode, Episode, EpisodeShape};
use crate::layers::Mode;
use crate::model::Model;
use crate::rng::SeededRng;

const STREAM_TRAIN_EPISODES: u64 = 11;
const STREAM_VAL_EPISODES: u64 = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub shape: EpisodeShape,
    pub optimizer: OptimizerConfig,
    /// Validate every this many steps (and after the last); 0 disables
    /// validation and keeps the final parameters.
    pub val_every: usize,
    pub val_episodes: usize,
    /// Cycle through this many pre-sampled training episodes instead of
    /// drawing a fresh one each step.
    pub fixed_episodes: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            shape: EpisodeShape::default(),
            optimizer: OptimizerConfig::default(),
            val_every: 100,
            val_episodes: 50,
            fixed_episodes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Append-only training log, one `step<TAB>loss<TAB>val_acc` line per
/// step; `val_acc` is `-` on steps without validation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("step\tloss\tval_acc\n");
        for e in &self.entries {
            let val = e.val_accuracy.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{}\t{}\t{}", e.step, e.loss, val);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub best_step: usize,
    pub best_val_accuracy: Option<f64>,
}

/// Episodic training. Each step samples a training episode, builds the
/// variant's loss, backpropagates and updates parameters and running
/// statistics. With validation enabled, the parameters with the best
/// validation accuracy (earliest on ties) are returned. A non-finite loss
/// aborts with [`Error::Divergence`]; entries logged up to that point stay
/// in `log`.
pub fn train(mut model: Model, dataset: &MultimodalDataset, config: &TrainConfig, log: &mut TrainLog) -> Result<TrainOutcome> {
    check_split(dataset, Split::Train, config.shape)?;
    let validate = config.val_every > 0;
    if validate {
        check_split(dataset, Split::Val, config.shape)?;
    }
    let mut optimizer = Optimizer::new(config.optimizer.clone())?;
    let root = SeededRng::new(config.seed);
    let mut episode_rng = root.derive(STREAM_TRAIN_EPISODES);
    let fixed: Vec<Episode> = match config.fixed_episodes {
        Some(0) => return Err(Error::Config("fixed episode count must be positive".into())),
        Some(n) => (0..n)
            .map(|_| sample_episode(dataset, Split::Train, config.shape, &mut episode_rng))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let val_config = EvalConfig {
        split: Split::Val,
        episodes: config.val_episodes.max(1),
        shape: config.shape,
        seed: root.derive(STREAM_VAL_EPISODES).next_u64(),
        workers: 1,
    };

    let mut best: Option<(f64, usize, Model)> = None;
    for step in 1..=config.steps {
        let fresh;
        let episode = if fixed.is_empty() {
            fresh = sample_episode(dataset, Split::Train, config.shape, &mut episode_rng)?;
            &fresh
        } else {
            &fixed[(step - 1) % fixed.len()]
        };
        let mut g = Graph::new();
        let built = match model.network.episode(&mut g, &model.params, dataset, episode, Mode::Train) {
            Ok(b) => b,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let loss = g.value(built.loss).item()?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grads = g.backward(built.loss)?;
        match optimizer.apply_update(&mut model.params, &grads) {
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss }),
            other => other?,
        }
        model.network.absorb_stats(&mut model.params, &built.stats)?;

        let val_accuracy = if validate && (step % config.val_every == 0 || step == config.steps) {
            let acc = evaluate(&model, dataset, &val_config)?.mean;
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, step, model.clone()));
            }
            Some(acc)
        } else {
            None
        };
        log.entries.push(LogEntry {
            step,
            loss,
            val_accuracy,
        });
    }
    Ok(match best {
        Some((acc, step, m)) => TrainOutcome {
            model: m,
            best_step: step,
            best_val_accuracy: Some(acc),
        },
        None => TrainOutcome {
            model,
            best_step: config.steps,
            best_val_accuracy: None,
        },
    })
}

/// Mean query accuracy of `model` on the given episodes (evaluation mode).
pub fn episodes_accuracy(model: &Model, dataset: &MultimodalDataset, episodes: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    for e in episodes {
        total += model.episode_accuracy(dataset, e)?;
    }
    Ok(total / episodes.len().max(1) as f64)
}

/// The pre-sampled episodes used by `fixed_episodes` training.
pub fn fixed_training_episodes(dataset: &MultimodalDataset, config: &TrainConfig) -> Result<Vec<Episode>> {
    let mut rng = SeededRng::new(config.seed).derive(STREAM_TRAIN_EPISODES);
    (0..config.fixed_episodes.unwrap_or(0))
        .map(|_| sample_episode(dataset, Split::Train, config.shape, &mut rng))
        .collect()
}
