//! Procedural stand-in for an attribute-annotated image dataset.
//!
//! Every class owns a binary attribute vector; each instance flips a few of
//! its attributes. Visible attributes paint a primitive (square, stripes or
//! disc, in an attribute-specific colour) into a fixed grid slot on top of a
//! dataset-wide base pattern. A seeded subset of `round(ambiguity · A)`
//! attributes is invisible: it reaches the attribute vector and the caption
//! embedding but never the pixels. Captions are `L · attributes + noise` for a
//! fixed random matrix `L`.

use super::{ClassSplits, DatasetMeta, MultimodalDataset};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const STREAM_CLASS_ATTRS: u64 = 1;
const STREAM_FLIPS: u64 = 2;
const STREAM_PIXEL_NOISE: u64 = 3;
const STREAM_CAPTION_MAP: u64 = 4;
const STREAM_CAPTION_NOISE: u64 = 5;
const STREAM_VISIBILITY: u64 = 6;
const STREAM_APPEARANCE: u64 = 7;
const STREAM_SPLITS: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub attributes: usize,
    pub embedding_dim: usize,
    /// Fraction of attributes that never reach the image, in `[0, 1]`.
    pub ambiguity: f64,
    pub flip_prob: f64,
    pub pixel_noise: f64,
    pub caption_noise: f64,
    /// Defaults to `round(0.2 · classes)` each.
    pub val_classes: Option<usize>,
    pub test_classes: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            per_class: 30,
            image_size: 16,
            attributes: 12,
            embedding_dim: 16,
            ambiguity: 0.0,
            flip_prob: 0.05,
            pixel_noise: 0.05,
            caption_noise: 0.1,
            val_classes: None,
            test_classes: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let default = (0.2 * self.classes as f64).round() as usize;
        let val = self.val_classes.unwrap_or(default);
        let test = self.test_classes.unwrap_or(default);
        (self.classes.saturating_sub(val + test), val, test)
    }

    pub fn grid(&self) -> usize {
        (self.attributes as f64).sqrt().ceil() as usize
    }

    pub fn invisible_count(&self) -> usize {
        (self.ambiguity * self.attributes as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 3 {
            return fail(format!("need at least 3 classes, got {}", self.classes));
        }
        if self.per_class == 0 || self.attributes == 0 || self.embedding_dim == 0 {
            return fail("per-class count, attribute count and embedding dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return fail(format!("ambiguity {} outside [0, 1]", self.ambiguity));
        }
        if !(0.0..=0.5).contains(&self.flip_prob) {
            return fail(format!("flip probability {} outside [0, 0.5]", self.flip_prob));
        }
        for (name, v) in [("pixel noise", self.pixel_noise), ("caption noise", self.caption_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if self.image_size < 2 * self.grid() {
            return fail(format!(
                "image size {} too small for {} attribute slots",
                self.image_size, self.attributes
            ));
        }
        let (train, val, test) = self.split_sizes();
        if val == 0 || test == 0 || train == 0 || train + val + test != self.classes {
            return fail(format!(
                "cannot split {} classes into train/val/test = {train}/{val}/{test}",
                self.classes
            ));
        }
        Ok(())
    }
}

/// Deterministic attribute-to-pixel renderer of one synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticRenderer {
    size: usize,
    grid: usize,
    cell: usize,
    visible: Vec<bool>,
    colors: Vec<[f64; 3]>,
    base: Vec<f64>,
    pixel_noise: f64,
    noise_root: SeededRng,
}

impl SyntheticRenderer {
    pub fn new(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(config.seed);
        let a = config.attributes;
        let mut visible = vec![true; a];
        for j in root.derive(STREAM_VISIBILITY).sample_indices(a, config.invisible_count()) {
            visible[j] = false;
        }
        let mut look = root.derive(STREAM_APPEARANCE);
        let colors = (0..a)
            .map(|_| [0.4 + 0.6 * look.uniform(), 0.4 + 0.6 * look.uniform(), 0.4 + 0.6 * look.uniform()])
            .collect();
        let s = config.image_size;
        let base = (0..3 * s * s).map(|_| 0.3 * look.uniform()).collect();
        let grid = config.grid();
        Ok(Self {
            size: s,
            grid,
            cell: s / grid,
            visible,
            colors,
            base,
            pixel_noise: config.pixel_noise,
            noise_root: root.derive(STREAM_PIXEL_NOISE),
        })
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    fn covers(&self, attribute: usize, dy: usize, dx: usize) -> bool {
        let c = self.cell;
        match attribute % 3 {
            0 => {
                let inset = usize::from(c >= 4);
                (inset..c - inset).contains(&dy) && (inset..c - inset).contains(&dx)
            }
            1 => dy.is_multiple_of(2),
            _ => {
                let centre = (c as f64 - 1.0) / 2.0;
                let r = c as f64 / 2.0;
                (dy as f64 - centre).powi(2) + (dx as f64 - centre).powi(2) <= r * r * 0.8
            }
        }
    }

    /// Renders instance `instance` with the given attribute vector as a
    /// `3×S×S` image in `[0, 1]`. Values ≥ 0.5 count as active.
    pub fn render(&self, attributes: &[f64], instance: usize) -> Result<Tensor> {
        if attributes.len() != self.visible.len() {
            return Err(Error::shape(format!(
                "{} attributes for a renderer of {}",
                attributes.len(),
                self.visible.len()
            )));
        }
        let s = self.size;
        let mut img = self.base.clone();
        for (j, &on) in attributes.iter().enumerate() {
            if on < 0.5 || !self.visible[j] {
                continue;
            }
            let (y0, x0) = ((j / self.grid) * self.cell, (j % self.grid) * self.cell);
            for dy in 0..self.cell {
                for dx in 0..self.cell {
                    if self.covers(j, dy, dx) {
                        for ch in 0..3 {
                            img[(ch * s + y0 + dy) * s + x0 + dx] = self.colors[j][ch];
                        }
                    }
                }
            }
        }
        if self.pixel_noise > 0.0 {
            let mut noise = self.noise_root.derive(instance as u64);
            for v in &mut img {
                *v += self.pixel_noise * noise.normal();
            }
        }
        for v in &mut img {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(vec![3, s, s], img)
    }
}

/// Generates a dataset; identical configs give bitwise-identical datasets.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<MultimodalDataset> {
    let renderer = SyntheticRenderer::new(config)?;
    let root = SeededRng::new(config.seed);
    let (a, e, s) = (config.attributes, config.embedding_dim, config.image_size);
    let n = config.classes * config.per_class;

    let mut class_rng = root.derive(STREAM_CLASS_ATTRS);
    let class_attrs: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| (0..a).map(|_| f64::from(u8::from(class_rng.bernoulli(0.5)))).collect())
        .collect();

    let mut map_rng = root.derive(STREAM_CAPTION_MAP);
    let map: Vec<f64> = (0..e * a).map(|_| map_rng.normal() / (a as f64).sqrt()).collect();

    let mut flips = root.derive(STREAM_FLIPS);
    let mut cap_noise = root.derive(STREAM_CAPTION_NOISE);
    let mut images = Vec::with_capacity(n * 3 * s * s);
    let mut attributes = Vec::with_capacity(n * a);
    let mut captions = Vec::with_capacity(n * e);
    let mut labels = Vec::with_capacity(n);
    for (k, base) in class_attrs.iter().enumerate() {
        for _ in 0..config.per_class {
            let instance = labels.len();
            let attrs: Vec<f64> = base
                .iter()
                .map(|&v| if flips.bernoulli(config.flip_prob) { 1.0 - v } else { v })
                .collect();
            images.extend_from_slice(renderer.render(&attrs, instance)?.data());
            for row in map.chunks_exact(a) {
                let clean: f64 = row.iter().zip(&attrs).map(|(l, x)| l * x).sum();
                captions.push(clean + config.caption_noise * cap_noise.normal());
            }
            attributes.extend_from_slice(&attrs);
            labels.push(k);
        }
    }

    let (_, nv, nt) = config.split_sizes();
    let mut order: Vec<usize> = (0..config.classes).collect();
    root.derive(STREAM_SPLITS).shuffle(&mut order);
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    let splits = ClassSplits {
        val: sorted(&order[..nv]),
        test: sorted(&order[nv..nv + nt]),
        train: sorted(&order[nv + nt..]),
    };

    MultimodalDataset::new(
        Tensor::new(vec![n, 3, s, s], images)?,
        labels,
        Tensor::new(vec![n, a], attributes)?,
        Tensor::new(vec![n, e], captions)?,
        splits,
        DatasetMeta {
            generator_seed: config.seed,
            ambiguity: config.ambiguity,
        },
    )
}
