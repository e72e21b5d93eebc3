//! The few-shot classifier and its conditioned variants.
//!
//! Every variant shares the same classifier backbone. Conditioned variants
//! feed a vector through the bridge MLP and use the resulting per-sample
//! `(Δγ, Δβ)` in every classifier batch-norm layer:
//!
//! | variant    | bridge input                                   |
//! |------------|------------------------------------------------|
//! | `baseline` | none, plain batch norm                         |
//! | `simpaux`  | pooled features of the auxiliary network       |
//! | `ablation` | a learned constant vector                      |
//! | `oracle`   | ground-truth attributes through a linear map   |
//!
//! Parameters are initialised from per-component derived streams, so two
//! variants built with the same seed start from identical classifier
//! weights.

mod auxiliary;
mod bridge;

pub use auxiliary::{AuxOutput, AuxiliaryNetwork};
pub use bridge::{BridgeConfig, BridgeMlp};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::config::{join_list, ConfigMap};
use crate::data::{Container, MultimodalDataset, Section};
use crate::error::{Error, Result};
use crate::fewshot::{episode_accuracy, episode_logits, Distance, Episode};
use crate::layers::{
    update_running, Backbone, BackboneConfig, Linear, Mode, ModulationDeltas, Pool,
};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::{softmax, Tensor};

const CONSTANT_SOURCE: &str = "source.constant";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Auxiliary,
    Ablation,
    Oracle,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Auxiliary, Variant::Ablation, Variant::Oracle];

    pub fn source(self) -> Option<BridgeSource> {
        match self {
            Variant::Baseline => None,
            Variant::Auxiliary => Some(BridgeSource::Auxiliary),
            Variant::Ablation => Some(BridgeSource::Constant),
            Variant::Oracle => Some(BridgeSource::OracleAttributes),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Auxiliary => "simpaux",
            Variant::Ablation => "ablation",
            Variant::Oracle => "oracle",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BridgeSource {
    Auxiliary,
    Constant,
    OracleAttributes,
}

/// Supervision used by the auxiliary network's loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxTarget {
    Attributes,
    Captions,
}

impl fmt::Display for AuxTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxTarget::Attributes => "attributes",
            AuxTarget::Captions => "captions",
        })
    }
}

impl FromStr for AuxTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attributes" => Ok(AuxTarget::Attributes),
            "captions" => Ok(AuxTarget::Captions),
            other => Err(Error::Config(format!("unknown aux target `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub classifier: BackboneConfig,
    pub auxiliary: BackboneConfig,
    pub bridge: BridgeConfig,
    pub distance: Distance,
    pub aux_target: AuxTarget,
    pub aux_weight: f64,
    pub stop_aux_gradient: bool,
    pub attribute_dim: usize,
    pub caption_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            classifier: BackboneConfig::reduced(),
            auxiliary: BackboneConfig::reduced(),
            bridge: BridgeConfig::default(),
            distance: Distance::SquaredEuclidean,
            aux_target: AuxTarget::Attributes,
            aux_weight: 0.3,
            stop_aux_gradient: false,
            attribute_dim: 12,
            caption_dim: 16,
        }
    }
}

/// Config keys understood by [`ModelConfig::from_map`].
pub const MODEL_KEYS: &[&str] = &[
    "variant",
    "distance",
    "aux_target",
    "aux_weight",
    "stop_aux_gradient",
    "attribute_dim",
    "caption_dim",
    "backbone.widths",
    "backbone.convs_per_block",
    "backbone.activation",
    "backbone.pooling",
    "backbone.embedding_dim",
    "aux.widths",
    "aux.convs_per_block",
    "aux.activation",
    "aux.pooling",
    "aux.embedding_dim",
    "bn.epsilon",
    "bn.momentum",
    "bridge.hidden",
    "bridge.depth",
    "bridge.activation",
    "bridge.zero_init",
];

fn backbone_from_map(map: &ConfigMap, prefix: &str, base: &BackboneConfig, eps: f64, momentum: f64) -> Result<BackboneConfig> {
    let widths = map.list(&format!("{prefix}.widths"))?.unwrap_or_else(|| base.widths.clone());
    let pooling: Vec<Pool> = match map.list(&format!("{prefix}.pooling"))? {
        Some(p) => p,
        None if widths.len() == base.pooling.len() => base.pooling.clone(),
        None => vec![Pool::Max; widths.len()],
    };
    let embedding_dim = match map.get(&format!("{prefix}.embedding_dim")) {
        None => base.embedding_dim,
        Some("none") => None,
        Some(_) => Some(map.parsed(&format!("{prefix}.embedding_dim"))?.expect("present")),
    };
    let cfg = BackboneConfig {
        in_channels: 3,
        widths,
        convs_per_block: map.parsed_or(&format!("{prefix}.convs_per_block"), base.convs_per_block)?,
        activation: map.parsed_or(&format!("{prefix}.activation"), base.activation)?,
        pooling,
        embedding_dim,
        bn_epsilon: eps,
        bn_momentum: momentum,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn backbone_to_map(map: &mut ConfigMap, prefix: &str, cfg: &BackboneConfig) {
    map.set(format!("{prefix}.widths"), join_list(&cfg.widths));
    map.set(format!("{prefix}.convs_per_block"), cfg.convs_per_block);
    map.set(format!("{prefix}.activation"), cfg.activation);
    map.set(format!("{prefix}.pooling"), join_list(&cfg.pooling));
    map.set(
        format!("{prefix}.embedding_dim"),
        cfg.embedding_dim.map_or("none".to_string(), |m| m.to_string()),
    );
}

impl ModelConfig {
    /// Reads model keys from `map`, falling back to `base` for absent ones.
    pub fn from_map(map: &ConfigMap, base: &ModelConfig) -> Result<Self> {
        let eps = map.parsed_or("bn.epsilon", base.classifier.bn_epsilon)?;
        let momentum = map.parsed_or("bn.momentum", base.classifier.bn_momentum)?;
        let cfg = Self {
            variant: map.parsed_or("variant", base.variant)?,
            classifier: backbone_from_map(map, "backbone", &base.classifier, eps, momentum)?,
            auxiliary: backbone_from_map(map, "aux", &base.auxiliary, eps, momentum)?,
            bridge: BridgeConfig {
                hidden: map.parsed_or("bridge.hidden", base.bridge.hidden)?,
                depth: map.parsed_or("bridge.depth", base.bridge.depth)?,
                activation: map.parsed_or("bridge.activation", base.bridge.activation)?,
                zero_init_output: map.parsed_or("bridge.zero_init", base.bridge.zero_init_output)?,
            },
            distance: map.parsed_or("distance", base.distance)?,
            aux_target: map.parsed_or("aux_target", base.aux_target)?,
            aux_weight: map.parsed_or("aux_weight", base.aux_weight)?,
            stop_aux_gradient: map.parsed_or("stop_aux_gradient", base.stop_aux_gradient)?,
            attribute_dim: map.parsed_or("attribute_dim", base.attribute_dim)?,
            caption_dim: map.parsed_or("caption_dim", base.caption_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set("variant", self.variant);
        m.set("distance", self.distance);
        m.set("aux_target", self.aux_target);
        m.set("aux_weight", self.aux_weight);
        m.set("stop_aux_gradient", self.stop_aux_gradient);
        m.set("attribute_dim", self.attribute_dim);
        m.set("caption_dim", self.caption_dim);
        backbone_to_map(&mut m, "backbone", &self.classifier);
        backbone_to_map(&mut m, "aux", &self.auxiliary);
        m.set("bn.epsilon", self.classifier.bn_epsilon);
        m.set("bn.momentum", self.classifier.bn_momentum);
        m.set("bridge.hidden", self.bridge.hidden);
        m.set("bridge.depth", self.bridge.depth);
        m.set("bridge.activation", self.bridge.activation);
        m.set("bridge.zero_init", self.bridge.zero_init_output);
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.auxiliary.validate()?;
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config(format!("aux_weight {} must be finite and >= 0", self.aux_weight)));
        }
        if self.attribute_dim == 0 || self.caption_dim == 0 {
            return Err(Error::Config("attribute and caption dims must be positive".into()));
        }
        Ok(())
    }

    /// Copies attribute/caption sizes from a dataset.
    pub fn fit_to(mut self, dataset: &MultimodalDataset) -> Self {
        self.attribute_dim = dataset.attribute_dim();
        self.caption_dim = dataset.caption_dim();
        self
    }
}

/// Output of one forward pass over a batch of images.
pub struct ForwardOutput {
    pub embedding: Var,
    pub aux: Option<AuxOutput>,
    pub deltas: Option<ModulationDeltas>,
    pub stats: Vec<(String, BatchStats)>,
}

/// Graph nodes of one episode's loss.
pub struct EpisodeGraph {
    pub loss: Var,
    pub proto_loss: Var,
    pub aux_loss: Option<Var>,
    pub logits: Var,
    pub stats: Vec<(String, BatchStats)>,
}

/// `proto + weight · aux`.
pub fn combined_loss(g: &mut Graph, proto: Var, aux: Option<Var>, weight: f64) -> Result<Var> {
    if weight.is_nan() || weight < 0.0 {
        return Err(Error::invalid(format!("aux loss weight {weight} must be >= 0")));
    }
    match aux {
        None => Ok(proto),
        Some(a) => {
            let scaled = g.scale(a, weight)?;
            g.add(proto, scaled)
        }
    }
}

/// Parameter-free description of a model; pairs with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub classifier: Backbone,
    pub auxiliary: Option<AuxiliaryNetwork>,
    pub bridge: Option<BridgeMlp>,
    oracle_embed: Option<Linear>,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let classifier = Backbone::new("classifier", config.classifier.clone())?;
        let source = config.variant.source();
        let auxiliary = match source {
            Some(BridgeSource::Auxiliary) => Some(AuxiliaryNetwork::new(
                "aux",
                config.auxiliary.clone(),
                config.attribute_dim,
                config.caption_dim,
            )?),
            _ => None,
        };
        let source_dim = config.auxiliary.embedding_dim();
        let bridge = match source {
            Some(_) => Some(BridgeMlp::new(
                "bridge",
                source_dim,
                classifier.bn_layers(),
                config.bridge.clone(),
            )?),
            None => None,
        };
        let oracle_embed = match source {
            Some(BridgeSource::OracleAttributes) => {
                Some(Linear::new("source.oracle", config.attribute_dim, source_dim))
            }
            _ => None,
        };
        Ok(Self {
            config,
            classifier,
            auxiliary,
            bridge,
            oracle_embed,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let root = SeededRng::new(seed);
        let mut store = ParamStore::new();
        self.classifier.init(&mut store, &mut root.derive(1));
        if let Some(a) = &self.auxiliary {
            a.init(&mut store, &mut root.derive(2));
        }
        if let Some(b) = &self.bridge {
            b.init(&mut store, &mut root.derive(3));
        }
        let mut src = root.derive(4);
        match self.config.variant.source() {
            Some(BridgeSource::Constant) => {
                let d = self.config.auxiliary.embedding_dim();
                store.insert(
                    CONSTANT_SOURCE,
                    Tensor::randn(&[d], 1.0, &mut src),
                    crate::params::Role::Weight,
                );
            }
            Some(BridgeSource::OracleAttributes) => {
                if let Some(l) = &self.oracle_embed {
                    l.init(&mut store, 1.0, &mut src);
                }
            }
            _ => {}
        }
        store
    }

    /// Embeds `images` (`B×3×H×W`). `attributes` (`B×A`) is required by the
    /// oracle variant and ignored otherwise.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: Var,
        attributes: Option<&Tensor>,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let batch = g.value(images).dims4()?.0;
        let mut stats = Vec::new();
        let mut aux = None;
        let deltas = match (self.config.variant.source(), &self.bridge) {
            (Some(source), Some(bridge)) => {
                let v = match source {
                    BridgeSource::Auxiliary => {
                        let net = self.auxiliary.as_ref().expect("aux network for aux source");
                        let out = net.forward(g, store, images, mode)?;
                        let e = if self.config.stop_aux_gradient {
                            g.stop_gradient(out.embedding)
                        } else {
                            out.embedding
                        };
                        aux = Some(out);
                        e
                    }
                    BridgeSource::Constant => {
                        let c = g.param(store, CONSTANT_SOURCE)?;
                        g.broadcast_rows(c, batch)?
                    }
                    BridgeSource::OracleAttributes => {
                        let a = attributes.ok_or_else(|| {
                            Error::invalid("oracle variant needs ground-truth attributes")
                        })?;
                        if a.shape() != [batch, self.config.attribute_dim] {
                            return Err(Error::shape(format!(
                                "attributes {:?} for a batch of {batch} with {} attributes",
                                a.shape(),
                                self.config.attribute_dim
                            )));
                        }
                        let x = g.input(a.clone());
                        self.oracle_embed
                            .as_ref()
                            .expect("oracle embedding")
                            .forward(g, store, x)?
                    }
                };
                Some(bridge.forward(g, store, v)?)
            }
            _ => None,
        };
        let out = self.classifier.forward(g, store, images, mode, deltas.as_ref())?;
        stats.extend(out.stats);
        if let Some(a) = &aux {
            stats.extend(a.stats.iter().cloned());
        }
        Ok(ForwardOutput {
            embedding: out.embedding,
            aux,
            deltas,
            stats,
        })
    }

    /// Builds the episode loss graph: support and query pass through the
    /// network as one batch.
    pub fn episode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dataset: &MultimodalDataset,
        episode: &Episode,
        mode: Mode,
    ) -> Result<EpisodeGraph> {
        let ids = episode.all_instances();
        let images = g.input(dataset.gather_images(&ids)?);
        let attributes = dataset.gather_attributes(&ids)?;
        let fwd = self.forward(g, store, images, Some(&attributes), mode)?;
        let ns = episode.support.len();
        let support = g.select_rows(fwd.embedding, &(0..ns).collect::<Vec<_>>())?;
        let query = g.select_rows(fwd.embedding, &(ns..ids.len()).collect::<Vec<_>>())?;
        let logits = episode_logits(
            g,
            support,
            &episode.support_labels,
            query,
            episode.shape.way,
            self.config.distance,
        )?;
        let proto_loss = g.cross_entropy(logits, &episode.query_labels)?;
        let aux_loss = match &fwd.aux {
            None => None,
            Some(a) => Some(match self.config.aux_target {
                AuxTarget::Attributes => g.multilabel_soft_margin(a.attribute_logits, &attributes)?,
                AuxTarget::Captions => {
                    g.cosine_embedding_loss(a.caption_pred, &dataset.gather_captions(&ids)?)?
                }
            }),
        };
        let loss = combined_loss(g, proto_loss, aux_loss, self.config.aux_weight)?;
        Ok(EpisodeGraph {
            loss,
            proto_loss,
            aux_loss,
            logits,
            stats: fwd.stats,
        })
    }

    /// Query-set accuracy in evaluation mode.
    pub fn episode_accuracy(&self, store: &ParamStore, dataset: &MultimodalDataset, episode: &Episode) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.episode(&mut g, store, dataset, episode, Mode::Eval)?;
        let probs = softmax(g.value(out.logits), 1)?;
        episode_accuracy(&probs, &episode.query_labels)
    }

    fn momentum_for(&self, layer: &str) -> f64 {
        if layer.starts_with("aux.") {
            self.config.auxiliary.bn_momentum
        } else {
            self.config.classifier.bn_momentum
        }
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn absorb_stats(&self, store: &mut ParamStore, stats: &[(String, BatchStats)]) -> Result<()> {
        for (layer, s) in stats {
            let momentum = self.momentum_for(layer);
            let mut rm = store.buffer(&format!("{layer}.running_mean"))?.clone();
            let mut rv = store.buffer(&format!("{layer}.running_var"))?.clone();
            update_running(&mut rm, &mut rv, s, momentum);
            *store.buffer_mut(&format!("{layer}.running_mean"))? = rm;
            *store.buffer_mut(&format!("{layer}.running_var"))? = rv;
        }
        Ok(())
    }
}

/// A network together with its parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub network: Network,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let network = Network::new(config)?;
        let params = network.init(seed);
        Ok(Self { network, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn episode_accuracy(&self, dataset: &MultimodalDataset, episode: &Episode) -> Result<f64> {
        self.network.episode_accuracy(&self.params, dataset, episode)
    }

    /// Checkpoint layout: a `meta` text section (`kind=checkpoint` plus the
    /// model config), then `param.<name>` and `buffer.<name>` tensors.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let meta = format!("kind=checkpoint\n{}", self.config().to_map().to_text());
        c.push(Section::text("meta", &meta))?;
        for (name, p) in self.params.params() {
            c.push(Section::tensor(format!("param.{name}"), &p.value))?;
        }
        for (name, b) in self.params.buffers() {
            c.push(Section::tensor(format!("buffer.{name}"), b))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let text = c.require("meta")?.to_text()?;
        let body = text
            .strip_prefix("kind=checkpoint\n")
            .ok_or_else(|| Error::Format("container does not hold a checkpoint".into()))?;
        let meta = ConfigMap::parse(body)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        meta.check_keys(MODEL_KEYS)?;
        let config = ModelConfig::from_map(&meta, &ModelConfig::default())?;
        let mut model = Model::new(config, 0)?;
        let mut expected = 0;
        for (name, p) in model.params.params_mut() {
            let t = c.require(&format!("param.{name}"))?.to_tensor()?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
            expected += 1;
        }
        let names: Vec<String> = model.params.buffers().map(|(n, _)| n.clone()).collect();
        for name in names {
            let t = c.require(&format!("buffer.{name}"))?.to_tensor()?;
            let slot = model.params.buffer_mut(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("checkpoint buffer `{name}` has wrong shape")));
            }
            *slot = t;
            expected += 1;
        }
        if c.sections().len() != expected + 1 {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {expected}",
                c.sections().len() - 1
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
