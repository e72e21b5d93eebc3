//! Episodes, class prototypes and distance-softmax classification.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::data::{MultimodalDataset, Split};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{softmax, Tensor};

const LOG_FLOOR: f64 = 1e-30;

/// Distance between query embeddings and prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Cosine,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::SquaredEuclidean => "sqeuclidean",
            Distance::Cosine => "cosine",
        })
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqeuclidean" => Ok(Distance::SquaredEuclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

/// Shape of an N-way K-shot episode with Q queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            query: 15,
        }
    }
}

impl EpisodeShape {
    pub fn validate(&self) -> Result<()> {
        if self.way < 1 || self.shot < 1 || self.query < 1 {
            return Err(Error::Config(format!(
                "episode shape {}-way {}-shot {}-query must be positive",
                self.way, self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// One sampled task. Support and query are grouped by episode class
/// (`0..way`), `shot` resp. `query` instances each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub shape: EpisodeShape,
    /// Dataset class id of each episode class.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    /// Support followed by query instance ids.
    pub fn all_instances(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).copied().collect()
    }
}

/// Checks that `split` can host episodes of `shape`.
pub fn check_split(dataset: &MultimodalDataset, split: Split, shape: EpisodeShape) -> Result<()> {
    shape.validate()?;
    let classes = dataset.splits().get(split);
    if classes.len() < shape.way {
        return Err(Error::InsufficientData(format!(
            "{split} split has {} classes, episode needs {}",
            classes.len(),
            shape.way
        )));
    }
    let need = shape.shot + shape.query;
    if let Some(&k) = classes.iter().find(|&&k| dataset.instances_of(k).len() < need) {
        return Err(Error::InsufficientData(format!(
            "class {k} has {} instances, episode needs {need}",
            dataset.instances_of(k).len()
        )));
    }
    Ok(())
}

pub fn sample_episode(
    dataset: &MultimodalDataset,
    split: Split,
    shape: EpisodeShape,
    rng: &mut SeededRng,
) -> Result<Episode> {
    check_split(dataset, split, shape)?;
    let pool = dataset.splits().get(split);
    let classes: Vec<usize> = rng
        .sample_indices(pool.len(), shape.way)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let mut ep = Episode {
        shape,
        classes: classes.clone(),
        support: Vec::with_capacity(shape.way * shape.shot),
        support_labels: Vec::with_capacity(shape.way * shape.shot),
        query: Vec::with_capacity(shape.way * shape.query),
        query_labels: Vec::with_capacity(shape.way * shape.query),
    };
    for (label, &k) in classes.iter().enumerate() {
        let members = dataset.instances_of(k);
        let picks = rng.sample_indices(members.len(), shape.shot + shape.query);
        for (j, &p) in picks.iter().enumerate() {
            if j < shape.shot {
                ep.support.push(members[p]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(members[p]);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}

/// Class centroids of support embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Tensor,
    pub distance: Distance,
}

pub fn compute_prototypes(
    embeddings: &Tensor,
    labels: &[usize],
    way: usize,
    distance: Distance,
) -> Result<PrototypeSet> {
    let mut g = Graph::new();
    let x = g.input(embeddings.clone());
    let c = g.class_means(x, labels, way)?;
    Ok(PrototypeSet {
        prototypes: g.value(c).clone(),
        distance,
    })
}

/// Negative distances `Bq×N`, the logits of the class softmax.
pub fn distance_logits(g: &mut Graph, query: Var, prototypes: Var, distance: Distance) -> Result<Var> {
    let d = match distance {
        Distance::SquaredEuclidean => g.sq_dist(query, prototypes)?,
        Distance::Cosine => g.cosine_dist(query, prototypes)?,
    };
    g.scale(d, -1.0)
}

/// Graph-level episode head: prototypes from support rows, logits for query
/// rows.
pub fn episode_logits(
    g: &mut Graph,
    support: Var,
    support_labels: &[usize],
    query: Var,
    way: usize,
    distance: Distance,
) -> Result<Var> {
    let protos = g.class_means(support, support_labels, way)?;
    distance_logits(g, query, protos, distance)
}

/// Class probabilities `Bq×N`; each row sums to 1.
pub fn classify(query: &Tensor, prototypes: &PrototypeSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.input(query.clone());
    let c = g.input(prototypes.prototypes.clone());
    let logits = distance_logits(&mut g, q, c, prototypes.distance)?;
    softmax(g.value(logits), 1)
}

fn check_rows(probabilities: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, n) = probabilities.dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
    }
    if b == 0 {
        return Err(Error::EmptyReduction(vec![0]));
    }
    if let Some(&k) = labels.iter().find(|&&k| k >= n) {
        return Err(Error::invalid(format!("label {k} out of range for {n} classes")));
    }
    Ok((b, n))
}

/// Mean negative log-probability of the true class.
pub fn protonet_loss(probabilities: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, n) = check_rows(probabilities, labels)?;
    let p = probabilities.data();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &k)| -p[i * n + k].max(LOG_FLOOR).ln())
        .sum();
    Ok(total / b as f64)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn episode_accuracy(probabilities: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = check_rows(probabilities, labels)?;
    let pred = probabilities.argmax_rows()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / b as f64)
}
