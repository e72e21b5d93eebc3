use std::path::PathBuf;

use crate::config::{join_list, ConfigMap};
use crate::data::{Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fewshot::EpisodeShape;
use crate::model::{ModelConfig, Variant, MODEL_KEYS};
use crate::train::{EvalConfig, OptimizerConfig, TrainConfig};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "BRIDGELAB_SEED";

pub const GEN_KEYS: &[&str] = &[
    "classes",
    "per_class",
    "image_size",
    "attributes",
    "embedding_dim",
    "ambiguity",
    "flip_prob",
    "pixel_noise",
    "caption_noise",
    "val_classes",
    "test_classes",
    "seed",
    "out",
];

const RUN_ONLY_KEYS: &[&str] = &[
    "dataset",
    "checkpoint",
    "out",
    "optimizer",
    "lr",
    "momentum",
    "weight_decay",
    "way",
    "shot",
    "query",
    "steps",
    "val_every",
    "val_episodes",
    "fixed_episodes",
    "seed",
    "seeds",
    "variants",
    "eval_seed",
    "eval_episodes",
    "eval_split",
    "workers",
];

pub fn run_keys() -> Vec<&'static str> {
    MODEL_KEYS.iter().chain(RUN_ONLY_KEYS).copied().collect()
}

/// Default seed: `BRIDGELAB_SEED` if set, else 0.
pub fn default_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn opt_count(map: &ConfigMap, key: &str) -> Result<Option<usize>> {
    match map.get(key) {
        None | Some("none") => Ok(None),
        Some(_) => map.parsed(key),
    }
}

/// Synthetic-data generation settings plus the output path.
pub fn gen_config_from_map(map: &ConfigMap, seed: u64) -> Result<(SyntheticConfig, Option<PathBuf>)> {
    map.check_keys(GEN_KEYS)?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        classes: map.parsed_or("classes", d.classes)?,
        per_class: map.parsed_or("per_class", d.per_class)?,
        image_size: map.parsed_or("image_size", d.image_size)?,
        attributes: map.parsed_or("attributes", d.attributes)?,
        embedding_dim: map.parsed_or("embedding_dim", d.embedding_dim)?,
        ambiguity: map.parsed_or("ambiguity", d.ambiguity)?,
        flip_prob: map.parsed_or("flip_prob", d.flip_prob)?,
        pixel_noise: map.parsed_or("pixel_noise", d.pixel_noise)?,
        caption_noise: map.parsed_or("caption_noise", d.caption_noise)?,
        val_classes: opt_count(map, "val_classes")?,
        test_classes: opt_count(map, "test_classes")?,
        seed: map.parsed_or("seed", seed)?,
    };
    cfg.validate()?;
    Ok((cfg, map.get("out").map(PathBuf::from)))
}

pub fn gen_config_to_map(cfg: &SyntheticConfig, out: Option<&PathBuf>) -> ConfigMap {
    let mut m = ConfigMap::new();
    m.set("classes", cfg.classes);
    m.set("per_class", cfg.per_class);
    m.set("image_size", cfg.image_size);
    m.set("attributes", cfg.attributes);
    m.set("embedding_dim", cfg.embedding_dim);
    m.set("ambiguity", cfg.ambiguity);
    m.set("flip_prob", cfg.flip_prob);
    m.set("pixel_noise", cfg.pixel_noise);
    m.set("caption_noise", cfg.caption_noise);
    let (_, val, test) = cfg.split_sizes();
    m.set("val_classes", val);
    m.set("test_classes", test);
    m.set("seed", cfg.seed);
    if let Some(o) = out {
        m.set("out", o.display());
    }
    m
}

/// Fully resolved settings of a train/eval/ablate run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl RunConfig {
    /// Reads a run configuration. Absent keys take defaults; `seed` falls
    /// back to `fallback_seed`, `eval_seed` to `seed`, and `seeds` to five
    /// consecutive seeds starting at `seed`.
    pub fn from_map(map: &ConfigMap, fallback_seed: u64) -> Result<Self> {
        map.check_keys(&run_keys())?;
        let model = ModelConfig::from_map(map, &ModelConfig::default())?;
        let seed: u64 = map.parsed_or("seed", fallback_seed)?;
        let shape = EpisodeShape {
            way: map.parsed_or("way", 5)?,
            shot: map.parsed_or("shot", 5)?,
            query: map.parsed_or("query", 15)?,
        };
        shape.validate()?;
        let od = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            kind: map.parsed_or("optimizer", od.kind)?,
            learning_rate: map.parsed_or("lr", od.learning_rate)?,
            momentum: map.parsed_or("momentum", od.momentum)?,
            weight_decay: map.parsed_or("weight_decay", od.weight_decay)?,
            ..od
        };
        optimizer.validate()?;
        let td = TrainConfig::default();
        let train = TrainConfig {
            steps: map.parsed_or("steps", td.steps)?,
            shape,
            optimizer,
            val_every: map.parsed_or("val_every", td.val_every)?,
            val_episodes: map.parsed_or("val_episodes", td.val_episodes)?,
            fixed_episodes: opt_count(map, "fixed_episodes")?,
            seed,
        };
        let eval = EvalConfig {
            split: map.parsed_or("eval_split", Split::Test)?,
            episodes: map.parsed_or("eval_episodes", 200)?,
            shape,
            seed: map.parsed_or("eval_seed", seed)?,
            workers: map.parsed_or("workers", 1)?,
        };
        if eval.episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if eval.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        let seeds = map
            .list("seeds")?
            .unwrap_or_else(|| (0..5).map(|i| seed.wrapping_add(i)).collect());
        let variants = map
            .list("variants")?
            .unwrap_or_else(|| vec![Variant::Baseline, Variant::Auxiliary, Variant::Ablation]);
        if variants.is_empty() {
            return Err(Error::Config("variants list is empty".into()));
        }
        Ok(Self {
            model,
            dataset: map.get("dataset").map(PathBuf::from),
            checkpoint: map.get("checkpoint").map(PathBuf::from),
            out: map.get("out").map(PathBuf::from),
            train,
            eval,
            seeds,
            variants,
        })
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = self.model.to_map();
        for (k, v) in [("dataset", &self.dataset), ("checkpoint", &self.checkpoint), ("out", &self.out)] {
            if let Some(p) = v {
                m.set(k, p.display());
            }
        }
        let o = &self.train.optimizer;
        m.set("optimizer", o.kind);
        m.set("lr", o.learning_rate);
        m.set("momentum", o.momentum);
        m.set("weight_decay", o.weight_decay);
        m.set("way", self.train.shape.way);
        m.set("shot", self.train.shape.shot);
        m.set("query", self.train.shape.query);
        m.set("steps", self.train.steps);
        m.set("val_every", self.train.val_every);
        m.set("val_episodes", self.train.val_episodes);
        m.set(
            "fixed_episodes",
            self.train.fixed_episodes.map_or("none".to_string(), |n| n.to_string()),
        );
        m.set("seed", self.train.seed);
        m.set("seeds", join_list(&self.seeds));
        m.set("variants", join_list(&self.variants));
        m.set("eval_seed", self.eval.seed);
        m.set("eval_episodes", self.eval.episodes);
        m.set("eval_split", self.eval.split);
        m.set("workers", self.eval.workers);
        m
    }

    pub fn require_dataset(&self) -> Result<&PathBuf> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Config("no dataset given (set `dataset` or --dataset)".into()))
    }

    pub fn require_out(&self) -> Result<&PathBuf> {
        self.out
            .as_ref()
            .ok_or_else(|| Error::Config("no output directory given (set `out` or --out)".into()))
    }
}
