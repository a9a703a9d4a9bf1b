//! Optimization experience memory: (problem, proposal, outcome) records,
//! similarity retrieval and effectiveness ranking.

use std::cmp::Ordering;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{cosine_similarity, EmbeddingVector};
use crate::graph::proposal::OptimizationProposal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceEntry {
    /// Assigned by [`ExperienceMemory::record`] when empty.
    #[serde(default)]
    pub entry_id: String,
    pub problem_context: String,
    pub context_vector: EmbeddingVector,
    pub proposal: OptimizationProposal,
    /// Fraction of the validation subset the proposal fixed.
    pub effectiveness: f64,
    pub accepted: bool,
    pub iteration: u32,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("effectiveness {0} is outside [0, 1]")]
    Effectiveness(f64),
    #[error("problem context is empty")]
    EmptyContext,
    #[error("entry id `{0}` already exists")]
    DuplicateId(String),
    #[error("context vector has dimension {got}, memory uses {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("memory file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("memory file {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Append-only store, optionally backed by a JSON-lines file.
#[derive(Debug, Default)]
pub struct ExperienceMemory {
    path: Option<PathBuf>,
    entries: Vec<ExperienceEntry>,
}

impl ExperienceMemory {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists; later records are appended to it.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, MemoryError> {
        let path = path.into();
        let io = |source| MemoryError::Io {
            path: path.clone(),
            source,
        };
        let mut entries = Vec::new();
        match File::open(&path) {
            Ok(file) => {
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(io)?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    entries.push(serde_json::from_str(&line).map_err(|e| {
                        MemoryError::Corrupt {
                            path: path.clone(),
                            line: i + 1,
                            message: e.to_string(),
                        }
                    })?);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io(e)),
        }
        Ok(Self {
            path: Some(path),
            entries,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn entries(&self) -> &[ExperienceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, entry_id: &str) -> Option<&ExperienceEntry> {
        self.entries.iter().find(|e| e.entry_id == entry_id)
    }

    /// Validates and appends `entry`, writing it through to disk first.
    pub fn record(&mut self, mut entry: ExperienceEntry) -> Result<String, MemoryError> {
        if !(0.0..=1.0).contains(&entry.effectiveness) {
            return Err(MemoryError::Effectiveness(entry.effectiveness));
        }
        if entry.problem_context.trim().is_empty() {
            return Err(MemoryError::EmptyContext);
        }
        if let Some(first) = self.entries.first() {
            if first.context_vector.dimension() != entry.context_vector.dimension() {
                return Err(MemoryError::Dimension {
                    expected: first.context_vector.dimension(),
                    got: entry.context_vector.dimension(),
                });
            }
        }
        if entry.entry_id.is_empty() {
            entry.entry_id = format!("exp-{:05}", self.entries.len() + 1);
        }
        if self.get(&entry.entry_id).is_some() {
            return Err(MemoryError::DuplicateId(entry.entry_id));
        }
        if let Some(path) = &self.path {
            let io = |source| MemoryError::Io {
                path: path.clone(),
                source,
            };
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io)?;
            file.write_all(line.as_bytes()).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        let id = entry.entry_id.clone();
        self.entries.push(entry);
        Ok(id)
    }

    /// Top `k` entries by context similarity. Ties go to the newer entry
    /// (later `created_at`, then later insertion).
    pub fn retrieve(&self, query: &EmbeddingVector, k: usize) -> Vec<ExperienceEntry> {
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| {
                cosine_similarity(query, &e.context_vector)
                    .ok()
                    .map(|s| (s, i))
            })
            .collect();
        scored.sort_by(|(sa, ia), (sb, ib)| {
            sb.total_cmp(sa)
                .then_with(|| {
                    self.entries[*ib]
                        .created_at
                        .cmp(&self.entries[*ia].created_at)
                })
                .then_with(|| ib.cmp(ia))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(_, i)| self.entries[i].clone())
            .collect()
    }
}

/// Stable sort by effectiveness, best first.
pub fn rank_group(mut entries: Vec<ExperienceEntry>) -> Vec<ExperienceEntry> {
    entries.sort_by(|a, b| {
        b.effectiveness
            .partial_cmp(&a.effectiveness)
            .unwrap_or(Ordering::Equal)
    });
    entries
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraoParams {
    /// Entries retrieved per query.
    pub k: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub pos_floor: f64,
    pub neg_ceiling: f64,
}

impl Default for GraoParams {
    fn default() -> Self {
        Self {
            k: 8,
            n_pos: 2,
            n_neg: 1,
            pos_floor: 0.5,
            neg_ceiling: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub entry_id: String,
    pub problem_context: String,
    pub proposal: OptimizationProposal,
    pub effectiveness: f64,
}

impl From<&ExperienceEntry> for Exemplar {
    fn from(e: &ExperienceEntry) -> Self {
        Self {
            entry_id: e.entry_id.clone(),
            problem_context: e.problem_context.clone(),
            proposal: e.proposal.clone(),
            effectiveness: e.effectiveness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExemplarBlock {
    pub positives: Vec<Exemplar>,
    pub negatives: Vec<Exemplar>,
    /// Empty when there are no exemplars.
    pub rendered: String,
}

impl ExemplarBlock {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

fn render_exemplar(out: &mut String, label: &str, e: &Exemplar) {
    let proposal = serde_json::to_string(&e.proposal).expect("proposal serializes");
    out.push_str(&format!(
        "[{label}, effectiveness {:.2}]\nProblem: {}\nProposal: {proposal}\n\n",
        e.effectiveness, e.problem_context
    ));
}

/// Picks the best entries at or above `pos_floor` and the worst at or below
/// `neg_ceiling` from an effectiveness-ranked group.
pub fn select_exemplars(ranked: &[ExperienceEntry], params: &GraoParams) -> ExemplarBlock {
    let positives: Vec<&ExperienceEntry> = ranked
        .iter()
        .filter(|e| e.effectiveness >= params.pos_floor)
        .take(params.n_pos)
        .collect();
    let mut negative_pool: Vec<&ExperienceEntry> = ranked
        .iter()
        .filter(|e| e.effectiveness <= params.neg_ceiling)
        .filter(|e| !positives.iter().any(|p| p.entry_id == e.entry_id))
        .collect();
    negative_pool.sort_by(|a, b| {
        a.effectiveness
            .partial_cmp(&b.effectiveness)
            .unwrap_or(Ordering::Equal)
    });
    negative_pool.truncate(params.n_neg);

    let positives: Vec<Exemplar> = positives.into_iter().map(Exemplar::from).collect();
    let negatives: Vec<Exemplar> = negative_pool.into_iter().map(Exemplar::from).collect();
    let mut rendered = String::new();
    if !positives.is_empty() || !negatives.is_empty() {
        rendered.push_str(
            "Earlier optimization attempts on similar problems, with measured effectiveness.\n\
             Build on the effective ones and do not repeat the ineffective ones.\n\n",
        );
        for e in &positives {
            render_exemplar(&mut rendered, "EFFECTIVE", e);
        }
        for e in &negatives {
            render_exemplar(&mut rendered, "INEFFECTIVE", e);
        }
    }
    ExemplarBlock {
        positives,
        negatives,
        rendered: rendered.trim_end().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(values.to_vec()).unwrap()
    }

    fn entry(context: &str, v: &[f64], effectiveness: f64, created_at: u64) -> ExperienceEntry {
        ExperienceEntry {
            entry_id: String::new(),
            problem_context: context.into(),
            context_vector: vector(v),
            proposal: OptimizationProposal {
                problem_context: context.into(),
                modifications: vec![],
            },
            effectiveness,
            accepted: effectiveness > 0.0,
            iteration: 1,
            created_at,
        }
    }

    #[test]
    fn just_recorded_entry_ranks_first() {
        let mut m = ExperienceMemory::in_memory();
        m.record(entry("other", &[0.0, 1.0], 1.0, 5)).unwrap();
        m.record(entry("same", &[1.0, 0.2], 0.5, 5)).unwrap();
        let id = m.record(entry("same", &[1.0, 0.2], 0.0, 5)).unwrap();
        let got = m.retrieve(&vector(&[1.0, 0.2]), 3);
        assert_eq!(got[0].entry_id, id);
        assert_eq!(got[0].effectiveness, 0.0);
        assert!(!got[0].accepted);
    }

    #[test]
    fn newer_timestamp_wins_similarity_ties() {
        let mut m = ExperienceMemory::in_memory();
        m.record(entry("a", &[1.0, 0.0], 0.5, 9)).unwrap();
        m.record(entry("b", &[1.0, 0.0], 0.5, 3)).unwrap();
        let got = m.retrieve(&vector(&[1.0, 0.0]), 2);
        assert_eq!(got[0].problem_context, "a");
    }

    #[test]
    fn empty_and_zero_k() {
        let mut m = ExperienceMemory::in_memory();
        assert!(m.retrieve(&vector(&[1.0]), 4).is_empty());
        m.record(entry("a", &[1.0], 0.5, 0)).unwrap();
        assert!(m.retrieve(&vector(&[1.0]), 0).is_empty());
        assert_eq!(m.retrieve(&vector(&[1.0]), 5).len(), 1);
    }

    #[test]
    fn invalid_entries_are_refused() {
        let mut m = ExperienceMemory::in_memory();
        assert!(matches!(
            m.record(entry("a", &[1.0], 1.5, 0)),
            Err(MemoryError::Effectiveness(_))
        ));
        assert!(matches!(
            m.record(entry(" ", &[1.0], 0.5, 0)),
            Err(MemoryError::EmptyContext)
        ));
        m.record(entry("a", &[1.0], 0.5, 0)).unwrap();
        assert!(matches!(
            m.record(entry("b", &[1.0, 0.0], 0.5, 0)),
            Err(MemoryError::Dimension { .. })
        ));
        assert!(m
            .record(ExperienceEntry {
                entry_id: "exp-00001".into(),
                ..entry("c", &[1.0], 0.5, 0)
            })
            .is_err());
    }

    #[test]
    fn reload_reproduces_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        let mut m = ExperienceMemory::open(&path).unwrap();
        m.record(entry("a", &[1.0, 2.0], 0.25, 1)).unwrap();
        m.record(entry("b", &[2.0, 1.0], 1.0, 2)).unwrap();
        let back = ExperienceMemory::open(&path).unwrap();
        assert_eq!(back.entries(), m.entries());
    }

    #[test]
    fn rank_group_is_stable() {
        let es: Vec<_> = [0.2, 0.9, 0.5]
            .iter()
            .map(|&e| entry("x", &[1.0], e, 0))
            .collect();
        let ranked: Vec<f64> = rank_group(es).iter().map(|e| e.effectiveness).collect();
        assert_eq!(ranked, vec![0.9, 0.5, 0.2]);
        let same: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|c| entry(c, &[1.0], 0.5, 0))
            .collect();
        let ranked: Vec<_> = rank_group(same)
            .into_iter()
            .map(|e| e.problem_context)
            .collect();
        assert_eq!(ranked, vec!["a", "b", "c"]);
    }

    #[test]
    fn exemplar_selection_basics() {
        let ranked = vec![
            ExperienceEntry {
                entry_id: "p".into(),
                ..entry("good", &[1.0], 1.0, 0)
            },
            ExperienceEntry {
                entry_id: "n".into(),
                ..entry("bad", &[1.0], 0.0, 0)
            },
        ];
        let params = GraoParams {
            n_pos: 1,
            n_neg: 1,
            ..GraoParams::default()
        };
        let block = select_exemplars(&ranked, &params);
        assert_eq!(block.positives.len(), 1);
        assert_eq!(block.positives[0].effectiveness, 1.0);
        assert_eq!(block.negatives[0].effectiveness, 0.0);
        assert!(block.rendered.contains("[EFFECTIVE, effectiveness 1.00]"));
        assert!(block.rendered.contains("[INEFFECTIVE, effectiveness 0.00]"));

        let mids: Vec<_> = (0..3)
            .map(|i| ExperienceEntry {
                entry_id: i.to_string(),
                ..entry("m", &[1.0], 0.5, 0)
            })
            .collect();
        let strict = GraoParams {
            pos_floor: 0.6,
            neg_ceiling: 0.4,
            ..GraoParams::default()
        };
        let block = select_exemplars(&mids, &strict);
        assert!(block.is_empty());
        assert!(block.rendered.is_empty());
    }

    #[test]
    fn an_entry_is_never_both_positive_and_negative() {
        let ranked = vec![ExperienceEntry {
            entry_id: "x".into(),
            ..entry("x", &[1.0], 0.3, 0)
        }];
        let overlapping = GraoParams {
            pos_floor: 0.2,
            neg_ceiling: 0.4,
            ..GraoParams::default()
        };
        let block = select_exemplars(&ranked, &overlapping);
        assert_eq!((block.positives.len(), block.negatives.len()), (1, 0));
    }
}
