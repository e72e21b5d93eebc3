//! Multimodal few-shot datasets: images with class labels, attribute vectors
//! and caption embeddings, split by class into train/val/test.

mod container;
mod synthetic;

pub use container::{parse_pairs, Container, DType, Section, MAGIC, VERSION};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticRenderer};

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub generator_seed: u64,
    pub ambiguity: f64,
}

/// Immutable multimodal dataset. Construction validates every invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    images: Tensor,
    labels: Vec<usize>,
    attributes: Tensor,
    captions: Tensor,
    splits: ClassSplits,
    meta: DatasetMeta,
    classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl MultimodalDataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        attributes: Tensor,
        captions: Tensor,
        splits: ClassSplits,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let (n, c, _, _) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("images need 3 channels, got {c}")));
        }
        let (na, _) = attributes.dims2()?;
        let (ne, _) = captions.dims2()?;
        if labels.len() != n || na != n || ne != n {
            return Err(Error::shape(format!(
                "{n} images, {} labels, {na} attribute rows, {ne} caption rows",
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("image values outside [0, 1]".into()));
        }
        if attributes.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("attribute values outside [0, 1]".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = BTreeSet::new();
        for &k in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if !seen.insert(k) {
                return Err(Error::Format(format!("class {k} appears in more than one split")));
            }
        }
        if seen.len() != classes || seen.iter().any(|&k| k >= classes) {
            return Err(Error::Format(format!(
                "splits cover {} of {classes} classes",
                seen.len()
            )));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &k) in labels.iter().enumerate() {
            by_class[k].push(i);
        }
        if let Some(k) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Format(format!("class {k} has no instances")));
        }
        Ok(Self {
            images,
            labels,
            attributes,
            captions,
            splits,
            meta,
            classes,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes.shape()[1]
    }

    pub fn caption_dim(&self) -> usize {
        self.captions.shape()[1]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn captions(&self) -> &Tensor {
        &self.captions
    }

    pub fn splits(&self) -> &ClassSplits {
        &self.splits
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn instances_of(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn gather_images(&self, ids: &[usize]) -> Result<Tensor> {
        self.images.select_rows(ids)
    }

    pub fn gather_attributes(&self, ids: &[usize]) -> Result<Tensor> {
        self.attributes.select_rows(ids)
    }

    pub fn gather_captions(&self, ids: &[usize]) -> Result<Tensor> {
        self.captions.select_rows(ids)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let meta = format!(
            "kind=dataset\ngenerator_seed={}\nambiguity={}\n",
            self.meta.generator_seed,
            self.meta.ambiguity
        );
        c.push(Section::text("meta", &meta))?;
        c.push(Section::tensor("images", &self.images))?;
        let as_u64 = |v: &[usize]| v.iter().map(|&x| x as u64).collect::<Vec<_>>();
        c.push(Section::u64s("labels", &as_u64(&self.labels)))?;
        c.push(Section::tensor("attributes", &self.attributes))?;
        c.push(Section::tensor("captions", &self.captions))?;
        c.push(Section::u64s("split.train", &as_u64(&self.splits.train)))?;
        c.push(Section::u64s("split.val", &as_u64(&self.splits.val)))?;
        c.push(Section::u64s("split.test", &as_u64(&self.splits.test)))?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let pairs = parse_pairs(&c.require("meta")?.to_text()?)?;
        let lookup = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("dataset metadata lacks `{key}`")))
        };
        if lookup("kind")? != "dataset" {
            return Err(Error::Format("container does not hold a dataset".into()));
        }
        let bad = |key: &str| Error::Format(format!("bad metadata value for `{key}`"));
        let meta = DatasetMeta {
            generator_seed: lookup("generator_seed")?.parse().map_err(|_| bad("generator_seed"))?,
            ambiguity: lookup("ambiguity")?.parse().map_err(|_| bad("ambiguity"))?,
        };
        let as_usize = |name: &str| -> Result<Vec<usize>> {
            c.require(name)?
                .to_u64s()?
                .into_iter()
                .map(|v| usize::try_from(v).map_err(|_| Error::Format(format!("{name} overflow"))))
                .collect()
        };
        Self::new(
            c.require("images")?.to_tensor()?,
            as_usize("labels")?,
            c.require("attributes")?.to_tensor()?,
            c.require("captions")?.to_tensor()?,
            ClassSplits {
                train: as_usize("split.train")?,
                val: as_usize("split.val")?,
                test: as_usize("split.test")?,
            },
            meta,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
