use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Activation, BnLayer, Linear, ModulationDeltas};
use crate::params::ParamStore;
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeConfig {
    pub hidden: usize,
    /// Number of hidden layers; zero makes the bridge a single linear map.
    pub depth: usize,
    pub activation: Activation,
    pub zero_init_output: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            depth: 2,
            activation: Activation::Silu,
            zero_init_output: true,
        }
    }
}

/// MLP from a conditioning vector to one `(Δγ, Δβ)` pair per batch-norm
/// layer of the classifier. The output row of width `2 · Σ C_l` is cut into
/// consecutive `[Δγ_l | Δβ_l]` blocks in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeMlp {
    pub config: BridgeConfig,
    pub input: usize,
    targets: Vec<BnLayer>,
    layers: Vec<Linear>,
}

impl BridgeMlp {
    pub fn new(prefix: &str, input: usize, targets: Vec<BnLayer>, config: BridgeConfig) -> Result<Self> {
        if input == 0 || (config.depth > 0 && config.hidden == 0) {
            return Err(Error::Config("bridge input and hidden widths must be positive".into()));
        }
        if targets.is_empty() {
            return Err(Error::Config("bridge needs at least one batch-norm target".into()));
        }
        let output = 2 * targets.iter().map(|l| l.channels).sum::<usize>();
        let mut layers = Vec::with_capacity(config.depth + 1);
        let mut width = input;
        for i in 0..config.depth {
            layers.push(Linear::new(format!("{prefix}.hidden{i}"), width, config.hidden));
            width = config.hidden;
        }
        layers.push(Linear::new(format!("{prefix}.out"), width, output));
        Ok(Self {
            config,
            input,
            targets,
            layers,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("bridge has an output layer").output
    }

    pub fn targets(&self) -> &[BnLayer] {
        &self.targets
    }

    /// `(start, channels)` of each layer's Δγ block; Δβ follows at
    /// `start + channels`.
    pub fn slices(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.targets
            .iter()
            .map(|l| {
                let s = (off, l.channels);
                off += 2 * l.channels;
                s
            })
            .collect()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut SeededRng) {
        let gain = match self.config.activation {
            Activation::Selu => 1.0,
            _ => 2.0,
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let g = if i == last {
                if self.config.zero_init_output {
                    0.0
                } else {
                    1.0
                }
            } else if i == 0 {
                1.0
            } else {
                gain
            };
            layer.init(store, g, rng);
        }
    }

    /// Raw bridge output, `B × output_dim`.
    pub fn forward_raw(&self, g: &mut Graph, store: &ParamStore, source: Var) -> Result<Var> {
        let (_, d) = g.value(source).dims2()?;
        if d != self.input {
            return Err(Error::shape(format!(
                "bridge expects a {}-dim source, got {d}",
                self.input
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = source;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = self.config.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, source: Var) -> Result<ModulationDeltas> {
        let out = self.forward_raw(g, store, source)?;
        let mut deltas = ModulationDeltas::default();
        for (start, c) in self.slices() {
            let dg = g.slice_cols(out, start, c)?;
            let db = g.slice_cols(out, start + c, c)?;
            deltas.layers.push((dg, db));
        }
        Ok(deltas)
    }
}
