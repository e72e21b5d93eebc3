use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::Result;
use crate::layers::{Backbone, BackboneConfig, Linear, Mode};
use crate::params::ParamStore;
use crate::rng::SeededRng;

/// Second visual backbone predicting attribute logits and a caption
/// embedding from its pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryNetwork {
    pub backbone: Backbone,
    pub attribute_head: Linear,
    pub caption_head: Linear,
}

pub struct AuxOutput {
    pub embedding: Var,
    pub attribute_logits: Var,
    pub caption_pred: Var,
    pub stats: Vec<(String, BatchStats)>,
}

impl AuxiliaryNetwork {
    pub fn new(prefix: &str, config: BackboneConfig, attributes: usize, caption_dim: usize) -> Result<Self> {
        let backbone = Backbone::new(format!("{prefix}.backbone"), config)?;
        let d = backbone.config.embedding_dim();
        Ok(Self {
            attribute_head: Linear::new(format!("{prefix}.attribute_head"), d, attributes),
            caption_head: Linear::new(format!("{prefix}.caption_head"), d, caption_dim),
            backbone,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.config.embedding_dim()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        self.backbone.init(store, rng);
        self.attribute_head.init(store, 1.0, rng);
        self.caption_head.init(store, 1.0, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var, mode: Mode) -> Result<AuxOutput> {
        let out = self.backbone.forward(g, store, images, mode, None)?;
        let attribute_logits = self.attribute_head.forward(g, store, out.embedding)?;
        let caption_pred = self.caption_head.forward(g, store, out.embedding)?;
        Ok(AuxOutput {
            embedding: out.embedding,
            attribute_logits,
            caption_pred,
            stats: out.stats,
        })
    }
}
