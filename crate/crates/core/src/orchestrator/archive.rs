//! On-disk run archive and replay.
//!
//! ```text
//! <root>/run_meta.json
//! <root>/memory.jsonl            experience memory (per-run default)
//! <root>/gradients.jsonl         append-only gradient store
//! <root>/iter_<n>/graph_before.json
//! <root>/iter_<n>/graph_after.json
//! <root>/iter_<n>/gradients.json reflections
//! <root>/iter_<n>/clusters.json
//! <root>/iter_<n>/proposals.json
//! <root>/iter_<n>/validations.json
//! <root>/iter_<n>/report.json
//! <root>/final_graph.json
//! <root>/report.json             run summary with cost figures
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cost::CostSummary;
use super::{IterationReport, LoopParams, RunError, ValidationReport};
use crate::cluster::{Clustering, ErrorCluster};
use crate::gradient::Reflection;
use crate::graph::proposal::{apply_proposal, EditScope, OptimizationProposal};
use crate::graph::{deserialize, serialize, TextualParameterGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema: String,
    #[serde(default)]
    pub fixture: Option<String>,
    pub scope: EditScope,
    pub params: LoopParams,
    pub task_ids: Vec<String>,
    pub started_at: u64,
}

impl RunMeta {
    pub const SCHEMA: &'static str = "tpgo-run/1";
}

/// One cluster's proposal outcome. Skipped clusters carry `error` and no
/// proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub cluster_id: usize,
    pub representative: String,
    pub proposal: Option<OptimizationProposal>,
    pub error: Option<String>,
    pub accepted: bool,
    pub effectiveness: Option<f64>,
}

impl ProposalRecord {
    pub(crate) fn skipped(cluster_id: usize, cluster: &ErrorCluster, reason: &str) -> Self {
        Self {
            cluster_id,
            representative: cluster.representative.clone(),
            proposal: None,
            error: Some(reason.to_string()),
            accepted: false,
            effectiveness: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: Vec<IterationReport>,
    pub cost: Option<CostSummary>,
    pub final_graph_hash: String,
    pub memory_entries: usize,
}

pub(crate) struct IterationArtifacts<'a> {
    pub graph_before: &'a TextualParameterGraph,
    pub graph_after: &'a TextualParameterGraph,
    pub reflections: &'a [Reflection],
    pub clustering: &'a Clustering,
    pub proposals: &'a [ProposalRecord],
    pub validations: &'a [ValidationReport],
    pub report: &'a IterationReport,
}

#[derive(Debug, Clone)]
pub struct Archive {
    root: PathBuf,
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("archive records serialize");
    s.push('\n');
    s
}

impl Archive {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, RunError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| RunError::Storage {
            path: root.clone(),
            source,
        })?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn memory_path(&self) -> PathBuf {
        self.root.join("memory.jsonl")
    }

    pub fn iteration_dir(&self, n: u32) -> PathBuf {
        self.root.join(format!("iter_{n}"))
    }

    /// Writes through a temporary file and a rename so a crash never leaves
    /// a half-written artifact.
    fn write(&self, rel: impl AsRef<Path>, contents: &str) -> Result<(), RunError> {
        let path = self.root.join(rel);
        let storage = |source| RunError::Storage {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(storage)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, contents).map_err(storage)?;
        fs::rename(&tmp, &path).map_err(storage)
    }

    pub fn write_meta(&self, meta: &RunMeta) -> Result<(), RunError> {
        self.write("run_meta.json", &pretty(meta))
    }

    pub(crate) fn write_iteration(
        &self,
        n: u32,
        a: &IterationArtifacts<'_>,
    ) -> Result<(), RunError> {
        let dir = format!("iter_{n}");
        self.write(
            format!("{dir}/graph_before.json"),
            &serialize(a.graph_before),
        )?;
        self.write(format!("{dir}/gradients.json"), &pretty(&a.reflections))?;
        self.write(format!("{dir}/clusters.json"), &pretty(a.clustering))?;
        self.write(format!("{dir}/proposals.json"), &pretty(&a.proposals))?;
        self.write(format!("{dir}/validations.json"), &pretty(&a.validations))?;
        self.write(format!("{dir}/report.json"), &pretty(a.report))?;
        self.write(format!("{dir}/graph_after.json"), &serialize(a.graph_after))
    }

    pub fn write_final(
        &self,
        graph: &TextualParameterGraph,
        summary: &RunSummary,
    ) -> Result<(), RunError> {
        self.write("final_graph.json", &serialize(graph))?;
        self.write("report.json", &pretty(summary))
    }

    /// Iteration numbers present on disk, ascending.
    pub fn iterations(&self) -> std::io::Result<Vec<u32>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name();
            if let Some(n) = name
                .to_str()
                .and_then(|s| s.strip_prefix("iter_"))
                .and_then(|s| s.parse().ok())
            {
                out.push(n);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Per-iteration reports read back from disk.
    pub fn reports(&self) -> Result<Vec<IterationReport>, ReplayError> {
        let iterations = self.iterations().map_err(|source| ReplayError::Io {
            path: self.root.clone(),
            source,
        })?;
        iterations
            .into_iter()
            .map(|n| read_json(&self.iteration_dir(n).join("report.json")))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("archive has no iterations")]
    NoIterations,
    #[error("iteration {iteration}: {reason}")]
    Diverged { iteration: u32, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub iterations: usize,
    pub accepted_proposals: usize,
    pub final_hash: String,
}

fn read_text(path: &Path) -> Result<String, ReplayError> {
    fs::read_to_string(path).map_err(|source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ReplayError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| ReplayError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_graph(path: &Path) -> Result<TextualParameterGraph, ReplayError> {
    deserialize(&read_text(path)?).map_err(|e| ReplayError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Re-applies every accepted proposal, in order, to the first archived
/// graph and checks each iteration's snapshots and the final graph by hash.
pub fn replay(root: impl AsRef<Path>) -> Result<ReplayOutcome, ReplayError> {
    let archive = Archive {
        root: root.as_ref().to_path_buf(),
    };
    let meta: RunMeta = read_json(&archive.root.join("run_meta.json"))?;
    let iterations = archive.iterations().map_err(|source| ReplayError::Io {
        path: archive.root.clone(),
        source,
    })?;
    let first = *iterations.first().ok_or(ReplayError::NoIterations)?;
    let mut graph = read_graph(&archive.iteration_dir(first).join("graph_before.json"))?;
    let mut accepted = 0;
    for &n in &iterations {
        let dir = archive.iteration_dir(n);
        let diverged = |reason: String| ReplayError::Diverged {
            iteration: n,
            reason,
        };
        if read_graph(&dir.join("graph_before.json"))?.content_hash() != graph.content_hash() {
            return Err(diverged(
                "graph_before differs from the replayed graph".into(),
            ));
        }
        let records: Vec<ProposalRecord> = read_json(&dir.join("proposals.json"))?;
        for record in records.iter().filter(|r| r.accepted) {
            let proposal = record.proposal.as_ref().ok_or_else(|| {
                diverged(format!(
                    "accepted cluster {} has no proposal",
                    record.cluster_id
                ))
            })?;
            graph = apply_proposal(&graph, proposal, meta.scope).map_err(|e| {
                diverged(format!(
                    "cluster {} proposal does not apply: {e}",
                    record.cluster_id
                ))
            })?;
            accepted += 1;
        }
        if read_graph(&dir.join("graph_after.json"))?.content_hash() != graph.content_hash() {
            return Err(diverged(
                "graph_after differs from the replayed graph".into(),
            ));
        }
    }
    let last = *iterations.last().expect("non-empty");
    let final_path = archive.root.join("final_graph.json");
    if final_path.exists() && read_graph(&final_path)?.content_hash() != graph.content_hash() {
        return Err(ReplayError::Diverged {
            iteration: last,
            reason: "final_graph differs from the replayed graph".into(),
        });
    }
    Ok(ReplayOutcome {
        iterations: iterations.len(),
        accepted_proposals: accepted,
        final_hash: graph.content_hash(),
    })
}
