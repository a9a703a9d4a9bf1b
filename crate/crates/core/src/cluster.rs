//! Deduplication and density clustering of failure descriptions.

use std::collections::{BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{cosine_similarity, EmbeddingVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedGradient {
    pub text: String,
    pub vector: EmbeddingVector,
    pub sources: BTreeSet<String>,
}

impl EmbeddedGradient {
    pub fn new(
        text: impl Into<String>,
        vector: EmbeddingVector,
        source: impl Into<String>,
    ) -> Self {
        Self {
            text: text.into(),
            vector,
            sources: BTreeSet::from([source.into()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCluster {
    pub members: Vec<EmbeddedGradient>,
    /// Medoid text; used as the problem context.
    pub representative: String,
    pub member_tasks: BTreeSet<String>,
}

impl ErrorCluster {
    /// Panics on an empty member list.
    pub fn from_members(members: Vec<EmbeddedGradient>) -> Self {
        let representative = members[medoid_index(&members)].text.clone();
        let member_tasks = members
            .iter()
            .flat_map(|m| m.sources.iter().cloned())
            .collect();
        Self {
            members,
            representative,
            member_tasks,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringParams {
    /// Maximum cosine distance between neighbours.
    pub eps: f64,
    pub min_samples: usize,
    pub dedupe_threshold: f64,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self {
            eps: 0.3,
            min_samples: 2,
            dedupe_threshold: 0.95,
        }
    }
}

impl ClusteringParams {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(ClusterError::InvalidParams(format!(
                "eps must be > 0, got {}",
                self.eps
            )));
        }
        if self.min_samples < 1 {
            return Err(ClusterError::InvalidParams(
                "min_samples must be >= 1".into(),
            ));
        }
        if !(self.dedupe_threshold > 0.0 && self.dedupe_threshold <= 1.0) {
            return Err(ClusterError::InvalidParams(format!(
                "dedupe_threshold must be in (0, 1], got {}",
                self.dedupe_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid clustering parameters: {0}")]
    InvalidParams(String),
    #[error("cannot deal {items} items into {k} groups")]
    TooManyGroups { k: usize, items: usize },
    #[error("gradient store {path}: {source}")]
    Store {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient store {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn similarity(a: &EmbeddedGradient, b: &EmbeddedGradient) -> f64 {
    cosine_similarity(&a.vector, &b.vector).expect("gradients share one embedding dimension")
}

/// Greedy near-duplicate removal in input order. A dropped item's sources
/// are merged into the first kept item it is similar to.
pub fn dedupe(items: &[EmbeddedGradient], threshold: f64) -> Vec<EmbeddedGradient> {
    let mut kept: Vec<EmbeddedGradient> = Vec::new();
    for item in items {
        match kept.iter_mut().find(|k| similarity(k, item) >= threshold) {
            Some(k) => k.sources.extend(item.sources.iter().cloned()),
            None => kept.push(item.clone()),
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<ErrorCluster>,
    pub noise: Vec<EmbeddedGradient>,
}

/// Cluster label per point (`None` = noise) under cosine distance.
///
/// Core points have at least `min_samples` points (self included) within
/// `eps`. Clusters are the connected components of core points, numbered
/// by their lowest index. A border point joins the cluster of its
/// lowest-index core neighbour.
pub fn dbscan_labels(
    vectors: &[EmbeddingVector],
    eps: f64,
    min_samples: usize,
) -> Vec<Option<usize>> {
    let n = vectors.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    1.0 - cosine_similarity(&vectors[i], &vectors[j]).expect("equal dimensions")
                        <= eps
                })
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours
        .iter()
        .map(|nb| nb.len() >= min_samples)
        .collect();
    let mut labels = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if core[q] && labels[q].is_none() {
                    labels[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = neighbours[i]
                .iter()
                .find(|&&j| core[j])
                .and_then(|&j| labels[j]);
        }
    }
    labels
}

pub fn dbscan(items: &[EmbeddedGradient], params: &ClusteringParams) -> Clustering {
    let vectors: Vec<EmbeddingVector> = items.iter().map(|i| i.vector.clone()).collect();
    let labels = dbscan_labels(&vectors, params.eps, params.min_samples);
    let count = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<EmbeddedGradient>> = vec![Vec::new(); count];
    let mut noise = Vec::new();
    for (item, label) in items.iter().zip(&labels) {
        match label {
            Some(l) => groups[*l].push(item.clone()),
            None => noise.push(item.clone()),
        }
    }
    Clustering {
        clusters: groups.into_iter().map(ErrorCluster::from_members).collect(),
        noise,
    }
}

/// Index of the member with the largest summed similarity to the other
/// members; the earliest index wins ties.
pub fn medoid_index(members: &[EmbeddedGradient]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, a) in members.iter().enumerate() {
        let score: f64 = members
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, b)| similarity(a, b))
            .sum();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

pub fn representative(cluster: &ErrorCluster) -> &str {
    &cluster.members[medoid_index(&cluster.members)].text
}

/// Every item as its own cluster.
pub fn singleton_clusters(items: &[EmbeddedGradient]) -> Vec<ErrorCluster> {
    items
        .iter()
        .map(|i| ErrorCluster::from_members(vec![i.clone()]))
        .collect()
}

/// Seeded random partition into `k` non-empty groups: a shuffled order
/// dealt round-robin. Members keep their input order within a group.
pub fn random_clusters(
    items: &[EmbeddedGradient],
    k: usize,
    seed: u64,
) -> Result<Vec<ErrorCluster>, ClusterError> {
    if k == 0 || k > items.len() {
        return Err(ClusterError::TooManyGroups {
            k,
            items: items.len(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (slot, index) in order.into_iter().enumerate() {
        groups[slot % k].push(index);
    }
    Ok(groups
        .into_iter()
        .map(|mut g| {
            g.sort_unstable();
            ErrorCluster::from_members(g.into_iter().map(|i| items[i].clone()).collect())
        })
        .collect())
}

/// One line of the gradient store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredGradient {
    pub iteration: u32,
    pub text: String,
    pub vector: EmbeddingVector,
    pub sources: BTreeSet<String>,
}

/// Append-only JSON-lines file of embedded gradients.
#[derive(Debug, Clone)]
pub struct GradientStore {
    path: PathBuf,
}

impl GradientStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn io(&self, source: std::io::Error) -> ClusterError {
        ClusterError::Store {
            path: self.path.clone(),
            source,
        }
    }

    pub fn append(&self, iteration: u32, items: &[EmbeddedGradient]) -> Result<(), ClusterError> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| self.io(e))?;
        let mut buf = String::new();
        for item in items {
            let record = StoredGradient {
                iteration,
                text: item.text.clone(),
                vector: item.vector.clone(),
                sources: item.sources.clone(),
            };
            buf.push_str(&serde_json::to_string(&record).expect("record serializes"));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes()).map_err(|e| self.io(e))?;
        file.flush().map_err(|e| self.io(e))
    }

    pub fn load(&self) -> Result<Vec<StoredGradient>, ClusterError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(self.io(e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| self.io(e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line).map_err(|e| ClusterError::Corrupt {
                    path: self.path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?,
            );
        }
        Ok(out)
    }
}
