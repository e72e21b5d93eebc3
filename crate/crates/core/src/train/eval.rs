use std::fmt::Write as _;
use std::thread;

use crate::data::{MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::fewshot::{check_split, sample_episode, Episode, EpisodeShape};
use crate::model::{Model, Variant};
use crate::rng::SeededRng;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Mean and 95% CI half-width `1.96 · s / √n` with the unbiased sample
/// standard deviation `s`. A single value has half-width 0.
pub fn mean_ci(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyReduction(vec![0]));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Z95 * var.sqrt() / n.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub split: Split,
    pub episodes: usize,
    pub shape: EpisodeShape,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            episodes: 200,
            shape: EpisodeShape::default(),
            seed: 0,
            workers: 1,
        }
    }
}

/// The evaluation episode stream. It depends only on the dataset, split,
/// shape, count and seed, never on the model, so every variant scored with
/// the same seed sees the same episodes.
pub fn eval_episodes(
    dataset: &MultimodalDataset,
    split: Split,
    shape: EpisodeShape,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    check_split(dataset, split, shape)?;
    let mut rng = SeededRng::new(seed);
    (0..count)
        .map(|_| sample_episode(dataset, split, shape, &mut rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub split: Split,
    pub shape: EpisodeShape,
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

impl EvalReport {
    pub fn new(variant: Variant, split: Split, shape: EpisodeShape, seed: u64, accuracies: Vec<f64>) -> Result<Self> {
        let (mean, ci95) = mean_ci(&accuracies)?;
        Ok(Self {
            variant,
            split,
            shape,
            seed,
            accuracies,
            mean,
            ci95,
        })
    }

    pub fn episodes(&self) -> usize {
        self.accuracies.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(
            s,
            "shape = {}-way {}-shot {}-query",
            self.shape.way, self.shape.shot, self.shape.query
        );
        let _ = writeln!(s, "eval_seed = {}", self.seed);
        let _ = writeln!(s, "episodes = {}", self.episodes());
        let _ = writeln!(s, "mean_accuracy = {}", self.mean);
        let _ = writeln!(s, "ci95 = {}", self.ci95);
        let _ = writeln!(s, "summary = {:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.ci95);
        s.push_str("accuracies =");
        for a in &self.accuracies {
            let _ = write!(s, " {a}");
        }
        s.push('\n');
        s
    }

    /// Parses [`EvalReport::to_text`] output; unknown keys are ignored and
    /// mean/CI are recomputed from the stored accuracies.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed report line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("report lacks `{k}`")))
        };
        let bad = |k: &str| Error::Format(format!("bad report value for `{k}`"));
        let shape_parts: Vec<usize> = get("shape")?
            .split_whitespace()
            .map(|p| p.split('-').next().and_then(|n| n.parse().ok()).ok_or_else(|| bad("shape")))
            .collect::<Result<_>>()?;
        let [way, shot, query] = shape_parts[..] else {
            return Err(bad("shape"));
        };
        let accuracies = get("accuracies")?
            .split_whitespace()
            .map(|a| a.parse::<f64>().map_err(|_| bad("accuracies")))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            get("variant")?.parse()?,
            get("split")?.parse()?,
            EpisodeShape { way, shot, query },
            get("eval_seed")?.parse().map_err(|_| bad("eval_seed"))?,
            accuracies,
        )
    }
}

/// Scores `model` on the shared episode stream. With `workers > 1`
/// episodes are split into contiguous chunks across threads and
/// concatenated back in stream order, so the report does not depend on the
/// worker count.
pub fn evaluate(model: &Model, dataset: &MultimodalDataset, config: &EvalConfig) -> Result<EvalReport> {
    if config.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let episodes = eval_episodes(dataset, config.split, config.shape, config.episodes, config.seed)?;
    let workers = config.workers.clamp(1, episodes.len());
    let accuracies = if workers == 1 {
        episodes
            .iter()
            .map(|e| model.episode_accuracy(dataset, e))
            .collect::<Result<Vec<_>>>()?
    } else {
        let chunk = episodes.len().div_ceil(workers);
        thread::scope(|scope| {
            let handles: Vec<_> = episodes
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|e| model.episode_accuracy(dataset, e))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(episodes.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    EvalReport::new(model.config().variant, config.split, config.shape, config.seed, accuracies)
}

/// Per-episode difference `a − b` over a shared episode stream, as
/// `(mean, ci95)`.
pub fn paired_delta(a: &EvalReport, b: &EvalReport) -> Result<(f64, f64)> {
    if a.seed != b.seed || a.split != b.split || a.shape != b.shape || a.episodes() != b.episodes() {
        return Err(Error::invalid(
            "paired comparison needs reports from the same evaluation stream",
        ));
    }
    let diffs: Vec<f64> = a.accuracies.iter().zip(&b.accuracies).map(|(x, y)| x - y).collect();
    mean_ci(&diffs)
}
