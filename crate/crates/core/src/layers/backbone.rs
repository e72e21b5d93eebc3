use std::fmt;
use std::str::FromStr;

use super::norm::{bn_forward, Mode, DEFAULT_EPSILON};
use super::{Activation, Linear};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Per-block downsampling after the residual merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max,
    Avg,
    None,
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pool::Max => "max",
            Pool::Avg => "avg",
            Pool::None => "none",
        })
    }
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pool::Max),
            "avg" => Ok(Pool::Avg),
            "none" => Ok(Pool::None),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub convs_per_block: usize,
    pub activation: Activation,
    /// One entry per block.
    pub pooling: Vec<Pool>,
    /// Output projection size; `None` keeps the pooled final width.
    pub embedding_dim: Option<usize>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

/// One batch-norm layer of a backbone, in forward order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BnLayer {
    pub name: String,
    pub channels: usize,
}

impl BackboneConfig {
    /// Two-block residual backbone used as the desk-scale default.
    pub fn reduced() -> Self {
        Self {
            in_channels: 3,
            widths: vec![32, 64],
            convs_per_block: 2,
            activation: Activation::Silu,
            pooling: vec![Pool::Max, Pool::Max],
            embedding_dim: None,
            bn_epsilon: DEFAULT_EPSILON,
            bn_momentum: super::DEFAULT_MOMENTUM,
        }
    }

    /// ResNet-12 layout: four blocks of three convolutions.
    pub fn resnet12() -> Self {
        Self {
            widths: vec![64, 128, 256, 512],
            convs_per_block: 3,
            pooling: vec![Pool::Max; 4],
            ..Self::reduced()
        }
    }

    pub fn with_widths(widths: &[usize]) -> Self {
        Self {
            pooling: vec![Pool::Max; widths.len()],
            widths: widths.to_vec(),
            ..Self::reduced()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid block widths {:?}", self.widths)));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be positive".into()));
        }
        if self.pooling.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{} pooling entries for {} blocks",
                self.pooling.len(),
                self.widths.len()
            )));
        }
        if self.embedding_dim == Some(0) || self.in_channels == 0 {
            return Err(Error::Config("zero-sized backbone input or embedding".into()));
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_momentum == 0.0 {
            return Err(Error::Config("batch-norm epsilon/momentum out of range".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
            .unwrap_or_else(|| *self.widths.last().expect("validated widths"))
    }

    /// Batch-norm layers in forward order: each block's convolution BNs, then
    /// its shortcut BN.
    pub fn bn_layers(&self, prefix: &str) -> Vec<BnLayer> {
        let mut out = Vec::new();
        for (b, &w) in self.widths.iter().enumerate() {
            for i in 0..self.convs_per_block {
                out.push(BnLayer {
                    name: format!("{prefix}.block{b}.bn{i}"),
                    channels: w,
                });
            }
            out.push(BnLayer {
                name: format!("{prefix}.block{b}.shortcut_bn"),
                channels: w,
            });
        }
        out
    }

    pub fn total_bn_channels(&self) -> usize {
        self.widths.iter().map(|w| w * (self.convs_per_block + 1)).sum()
    }

    /// Spatial size after every block, or an error if a pool runs out of room.
    pub fn output_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for (b, pool) in self.pooling.iter().enumerate() {
            if *pool != Pool::None {
                if h < 2 || w < 2 {
                    return Err(Error::shape(format!(
                        "spatial size {h}x{w} underflows at block {b} pooling"
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok((h, w))
    }
}

/// Per-layer `(Δγ, Δβ)` graph nodes, each `B×C`, aligned with
/// [`BackboneConfig::bn_layers`].
#[derive(Clone, Debug, Default)]
pub struct ModulationDeltas {
    pub layers: Vec<(Var, Var)>,
}

impl ModulationDeltas {
    pub fn check(&self, g: &Graph, layers: &[BnLayer], batch: usize) -> Result<()> {
        if self.layers.len() != layers.len() {
            return Err(Error::shape(format!(
                "{} modulation slices for {} batch-norm layers",
                self.layers.len(),
                layers.len()
            )));
        }
        for ((dg, db), layer) in self.layers.iter().zip(layers) {
            for d in [dg, db] {
                if g.value(*d).shape() != [batch, layer.channels] {
                    return Err(Error::shape(format!(
                        "delta {:?} for layer {} expecting [{batch}, {}]",
                        g.value(*d).shape(),
                        layer.name,
                        layer.channels
                    )));
                }
            }
        }
        Ok(())
    }
}

pub struct BackboneOutput {
    /// `B×M` embedding.
    pub embedding: Var,
    /// Training-mode statistics per batch-norm layer name.
    pub stats: Vec<(String, BatchStats)>,
}

/// Residual convolutional feature extractor. Each block runs
/// `convs_per_block` 3×3 conv → BN (→ activation, except after the last),
/// adds a 1×1 conv → BN shortcut, applies the activation, then pools.
/// A global average pool (and optional linear projection) gives the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub prefix: String,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(prefix: impl Into<String>, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            config,
        })
    }

    pub fn bn_layers(&self) -> Vec<BnLayer> {
        self.config.bn_layers(&self.prefix)
    }

    fn conv_name(&self, block: usize, i: usize) -> String {
        format!("{}.block{block}.conv{i}.weight", self.prefix)
    }

    fn shortcut_name(&self, block: usize) -> String {
        format!("{}.block{block}.shortcut.weight", self.prefix)
    }

    fn projection(&self) -> Option<Linear> {
        self.config.embedding_dim.map(|m| {
            Linear::new(
                format!("{}.proj", self.prefix),
                *self.config.widths.last().expect("validated widths"),
                m,
            )
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        let gain = self.config.activation.init_gain();
        let mut cin = self.config.in_channels;
        for (b, &w) in self.config.widths.iter().enumerate() {
            for i in 0..self.config.convs_per_block {
                let c = if i == 0 { cin } else { w };
                let std = (gain / (c * 9) as f64).sqrt();
                store.insert(self.conv_name(b, i), Tensor::randn(&[w, c, 3, 3], std, rng), Role::Weight);
            }
            let std = (gain / cin as f64).sqrt();
            store.insert(self.shortcut_name(b), Tensor::randn(&[w, cin, 1, 1], std, rng), Role::Weight);
            cin = w;
        }
        for layer in self.bn_layers() {
            let c = layer.channels;
            store.insert(format!("{}.gamma", layer.name), Tensor::ones(&[c]), Role::BnGamma);
            store.insert(format!("{}.beta", layer.name), Tensor::zeros(&[c]), Role::BnBeta);
            store.insert_buffer(format!("{}.running_mean", layer.name), Tensor::zeros(&[c]));
            store.insert_buffer(format!("{}.running_var", layer.name), Tensor::ones(&[c]));
        }
        if let Some(proj) = self.projection() {
            proj.init(store, 1.0, rng);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layer: &BnLayer,
        mode: Mode,
        delta: Option<(Var, Var)>,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", layer.name))?;
        let beta = g.param(store, &format!("{}.beta", layer.name))?;
        let rm = store.buffer(&format!("{}.running_mean", layer.name))?;
        let rv = store.buffer(&format!("{}.running_var", layer.name))?;
        let (y, s) = bn_forward(
            g,
            x,
            gamma,
            beta,
            (rm.data(), rv.data()),
            self.config.bn_epsilon,
            mode,
            delta,
        )?;
        if let Some(s) = s {
            stats.push((layer.name.clone(), s));
        }
        Ok(y)
    }

    /// Embeds `x: B×C×H×W`. With `deltas` present every batch-norm layer is
    /// conditioned; without, all layers run unconditioned.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        deltas: Option<&ModulationDeltas>,
    ) -> Result<BackboneOutput> {
        let (batch, c, h, w) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "{} expects {} input channels, got {c}",
                self.prefix, self.config.in_channels
            )));
        }
        self.config.output_spatial(h, w)?;
        let layers = self.bn_layers();
        if let Some(d) = deltas {
            d.check(g, &layers, batch)?;
        }
        let act = self.config.activation;
        let mut stats = Vec::new();
        let mut layer_iter = 0usize;
        let mut next = |g: &mut Graph, x: Var, stats: &mut Vec<_>| -> Result<Var> {
            let layer = &layers[layer_iter];
            let delta = deltas.map(|d| d.layers[layer_iter]);
            layer_iter += 1;
            self.bn(g, store, x, layer, mode, delta, stats)
        };

        let mut h = x;
        for (b, pool) in self.config.pooling.iter().enumerate() {
            let input = h;
            let mut y = input;
            for i in 0..self.config.convs_per_block {
                let wv = g.param(store, &self.conv_name(b, i))?;
                y = g.conv2d(y, wv, 1, 1)?;
                y = next(g, y, &mut stats)?;
                if i + 1 < self.config.convs_per_block {
                    y = act.apply(g, y)?;
                }
            }
            let sw = g.param(store, &self.shortcut_name(b))?;
            let mut s = g.conv2d(input, sw, 1, 0)?;
            s = next(g, s, &mut stats)?;
            let merged = g.add(y, s)?;
            h = act.apply(g, merged)?;
            h = match pool {
                Pool::Max => g.max_pool2d(h, 2, 2)?,
                Pool::Avg => g.avg_pool2d(h, 2, 2)?,
                Pool::None => h,
            };
        }
        let mut emb = g.global_avg_pool(h)?;
        if let Some(proj) = self.projection() {
            emb = proj.forward(g, store, emb)?;
        }
        Ok(BackboneOutput {
            embedding: emb,
            stats,
        })
    }
}
