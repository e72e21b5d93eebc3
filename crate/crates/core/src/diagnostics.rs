//! Finite-difference gradient checks of every differentiable component at
//! tiny sizes.

use crate::autodiff::{grad_check, Faults, GradCheckReport, Graph, Var};
use crate::data::{generate_synthetic, Split, SyntheticConfig};
use crate::error::Result;
use crate::fewshot::{episode_logits, sample_episode, Distance, EpisodeShape};
use crate::layers::{bn_forward, Activation, Backbone, BackboneConfig, Linear, Mode};
use crate::model::{AuxiliaryNetwork, BridgeConfig, BridgeMlp, ModelConfig, Network, Variant};
use crate::params::{ParamStore, Role};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub report: GradCheckReport,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

fn tiny_backbone(widths: &[usize]) -> BackboneConfig {
    BackboneConfig::with_widths(widths)
}

fn check<F>(store: &mut ParamStore, faults: Faults, build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check(store, &[], GRADCHECK_EPSILON, faults, build)
}

fn dense(seed: u64, faults: Faults) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let lin = Linear::new("dense", 4, 3);
    let mut store = ParamStore::new();
    lin.init(&mut store, 1.0, &mut rng);
    store.get_mut("dense.bias")?.value = Tensor::randn(&[3], 0.5, &mut rng);
    store.insert("x", Tensor::randn(&[5, 4], 1.0, &mut rng), Role::Weight);
    let w = Tensor::randn(&[5, 3], 1.0, &mut rng);
    check(&mut store, faults, |g, s| {
        let x = g.param(s, "x")?;
        let y = lin.forward(g, s, x)?;
        g.dot_const(y, &w)
    })
}

fn conv(seed: u64, faults: Faults) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    store.insert("x", Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng), Role::Weight);
    store.insert("w", Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng), Role::Weight);
    let proj = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
    check(&mut store, faults, |g, s| {
        let x = g.param(s, "x")?;
        let w = g.param(s, "w")?;
        let y = g.conv2d(x, w, 1, 1)?;
        g.dot_const(y, &proj)
    })
}

fn batch_norm(seed: u64, faults: Faults, conditional: bool) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    store.insert("x", Tensor::randn(&[4, 3, 2, 2], 1.5, &mut rng).map(|v| v + 0.7), Role::Weight);
    store.insert("gamma", Tensor::uniform(&[3], 0.5, 1.5, &mut rng), Role::BnGamma);
    store.insert("beta", Tensor::randn(&[3], 0.5, &mut rng), Role::BnBeta);
    if conditional {
        store.insert("dgamma", Tensor::randn(&[4, 3], 0.3, &mut rng), Role::Weight);
        store.insert("dbeta", Tensor::randn(&[4, 3], 0.3, &mut rng), Role::Weight);
    }
    let proj = Tensor::randn(&[4, 3, 2, 2], 1.0, &mut rng);
    let (rm, rv) = (vec![0.0; 3], vec![1.0; 3]);
    check(&mut store, faults, |g, s| {
        let x = g.param(s, "x")?;
        let gamma = g.param(s, "gamma")?;
        let beta = g.param(s, "beta")?;
        let delta = if conditional {
            Some((g.param(s, "dgamma")?, g.param(s, "dbeta")?))
        } else {
            None
        };
        let (y, _) = bn_forward(g, x, gamma, beta, (&rm, &rv), 1e-5, Mode::Train, delta)?;
        g.dot_const(y, &proj)
    })
}

fn backbone(seed: u64, faults: Faults) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let bb = Backbone::new("bb", tiny_backbone(&[4, 8]))?;
    let mut store = ParamStore::new();
    bb.init(&mut store, &mut rng);
    let x = Tensor::uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng);
    let proj = Tensor::randn(&[4, 8], 1.0, &mut rng);
    check(&mut store, faults, |g, s| {
        let xv = g.input(x.clone());
        let out = bb.forward(g, s, xv, Mode::Train, None)?;
        g.dot_const(out.embedding, &proj)
    })
}

fn bridge(seed: u64, faults: Faults) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let targets = tiny_backbone(&[3, 5]).bn_layers("c");
    let cfg = BridgeConfig {
        hidden: 6,
        depth: 2,
        activation: Activation::Silu,
        zero_init_output: false,
    };
    let b = BridgeMlp::new("bridge", 4, targets, cfg)?;
    let mut store = ParamStore::new();
    b.init(&mut store, &mut rng);
    let src = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let weights: Vec<(Tensor, Tensor)> = b
        .slices()
        .iter()
        .map(|&(_, c)| (Tensor::randn(&[3, c], 1.0, &mut rng), Tensor::randn(&[3, c], 1.0, &mut rng)))
        .collect();
    check(&mut store, faults, |g, s| {
        let v = g.input(src.clone());
        let deltas = b.forward(g, s, v)?;
        let mut total: Option<Var> = None;
        for ((dg, db), (wg, wb)) in deltas.layers.iter().zip(&weights) {
            let a = g.dot_const(*dg, wg)?;
            let c = g.dot_const(*db, wb)?;
            let ac = g.add(a, c)?;
            total = Some(match total {
                None => ac,
                Some(t) => g.add(t, ac)?,
            });
        }
        Ok(total.expect("at least one layer"))
    })
}

fn prototype_loss(seed: u64, faults: Faults, distance: Distance) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    store.insert("support", Tensor::randn(&[6, 4], 1.0, &mut rng), Role::Weight);
    store.insert("query", Tensor::randn(&[6, 4], 1.0, &mut rng), Role::Weight);
    let support_labels = [0, 0, 1, 1, 2, 2];
    let query_labels = [0, 1, 2, 0, 1, 2];
    check(&mut store, faults, |g, s| {
        let sv = g.param(s, "support")?;
        let qv = g.param(s, "query")?;
        let logits = episode_logits(g, sv, &support_labels, qv, 3, distance)?;
        g.cross_entropy(logits, &query_labels)
    })
}

fn multilabel(seed: u64, faults: Faults) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    store.insert("logits", Tensor::randn(&[4, 5], 2.0, &mut rng), Role::Weight);
    let targets = Tensor::uniform(&[4, 5], 0.0, 1.0, &mut rng);
    check(&mut store, faults, |g, s| {
        let x = g.param(s, "logits")?;
        g.multilabel_soft_margin(x, &targets)
    })
}

fn cosine(seed: u64, faults: Faults) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    store.insert("pred", Tensor::randn(&[4, 5], 1.0, &mut rng), Role::Weight);
    let target = Tensor::randn(&[4, 5], 1.0, &mut rng);
    check(&mut store, faults, |g, s| {
        let x = g.param(s, "pred")?;
        g.cosine_embedding_loss(x, &target)
    })
}

fn auxiliary_heads(seed: u64, faults: Faults) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let net = AuxiliaryNetwork::new("aux", tiny_backbone(&[3, 4]), 5, 3)?;
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    let x = Tensor::uniform(&[4, 3, 8, 8], 0.0, 1.0, &mut rng);
    let attrs = Tensor::uniform(&[4, 5], 0.0, 1.0, &mut rng);
    let captions = Tensor::randn(&[4, 3], 1.0, &mut rng);
    check(&mut store, faults, |g, s| {
        let xv = g.input(x.clone());
        let out = net.forward(g, s, xv, Mode::Train)?;
        let a = g.multilabel_soft_margin(out.attribute_logits, &attrs)?;
        let c = g.cosine_embedding_loss(out.caption_pred, &captions)?;
        g.add(a, c)
    })
}

/// Tiny model configuration used by the end-to-end check.
pub fn tiny_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        classifier: tiny_backbone(&[3, 4]),
        auxiliary: tiny_backbone(&[3, 4]),
        bridge: BridgeConfig {
            hidden: 5,
            depth: 1,
            activation: Activation::Silu,
            zero_init_output: false,
        },
        attribute_dim: 4,
        caption_dim: 3,
        ..ModelConfig::default()
    }
}

/// Tiny synthetic dataset matching [`tiny_model_config`].
pub fn tiny_dataset_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        classes: 9,
        per_class: 4,
        image_size: 8,
        attributes: 4,
        embedding_dim: 3,
        seed,
        ..SyntheticConfig::default()
    }
}

fn combined(seed: u64, faults: Faults) -> Result<GradCheckReport> {
    let ds = generate_synthetic(&tiny_dataset_config(seed))?;
    let net = Network::new(tiny_model_config(Variant::Auxiliary))?;
    let mut store = net.init(seed);
    let shape = EpisodeShape {
        way: 3,
        shot: 2,
        query: 2,
    };
    let episode = sample_episode(&ds, Split::Train, shape, &mut SeededRng::new(seed))?;
    check(&mut store, faults, |g, s| {
        Ok(net.episode(g, s, &ds, &episode, Mode::Train)?.loss)
    })
}

/// Runs every component check. Each component draws its own instance from
/// `seed`.
pub fn gradient_suite(seed: u64, faults: Faults) -> Result<Vec<ComponentCheck>> {
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    Ok(vec![
        ComponentCheck { component: "dense", report: dense(s(1), faults)? },
        ComponentCheck { component: "conv2d", report: conv(s(2), faults)? },
        ComponentCheck { component: "batch-norm (train)", report: batch_norm(s(3), faults, false)? },
        ComponentCheck { component: "conditional batch-norm", report: batch_norm(s(4), faults, true)? },
        ComponentCheck { component: "backbone", report: backbone(s(5), faults)? },
        ComponentCheck { component: "bridge", report: bridge(s(6), faults)? },
        ComponentCheck {
            component: "prototype loss (sq. euclidean)",
            report: prototype_loss(s(7), faults, Distance::SquaredEuclidean)?,
        },
        ComponentCheck {
            component: "prototype loss (cosine)",
            report: prototype_loss(s(8), faults, Distance::Cosine)?,
        },
        ComponentCheck { component: "multi-label soft margin", report: multilabel(s(9), faults)? },
        ComponentCheck { component: "cosine embedding loss", report: cosine(s(10), faults)? },
        ComponentCheck { component: "auxiliary heads", report: auxiliary_heads(s(11), faults)? },
        ComponentCheck { component: "combined graph", report: combined(s(12), faults)? },
    ])
}
