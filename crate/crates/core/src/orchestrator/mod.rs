//! The closed optimization loop: execute, reflect, cluster, propose,
//! validate, accept or roll back, record, archive.

mod archive;
mod command;
mod config;
mod cost;
mod engine;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterError, ClusteringParams};
use crate::gateway::{
    ChatGateway, Clock, EmbeddingGateway, GatewayError, UsageCounters, UsageLedger,
};
use crate::gradient::{Outcome, Trajectory};
use crate::graph::{MaterializedConfig, TextualParameterGraph};
use crate::memory::{GraoParams, MemoryError};
use crate::util::parallel_map;

pub use archive::{
    replay, Archive, ProposalRecord, ReplayError, ReplayOutcome, RunMeta, RunSummary,
};
pub use command::CommandRunner;
pub use config::{ConfigError, ProviderSettings, RunConfig, RunnerSettings};
pub use cost::{cost_report, CostError, CostSummary};
pub use engine::{Evolution, RunOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

/// The agent system under optimization.
pub trait AgentRunner: Send + Sync {
    /// `Err` means the environment failed, not the agent.
    fn run(&self, config: &MaterializedConfig, task: &Task) -> Result<Trajectory, String>;
}

pub trait Evaluator: Send + Sync {
    fn judge(&self, trajectory: &Trajectory, task: &Task) -> Outcome;
}

/// Keeps an outcome the runner already decided; otherwise compares the
/// final answer with the reference (trimmed, case-insensitive).
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultEvaluator;

impl Evaluator for DefaultEvaluator {
    fn judge(&self, trajectory: &Trajectory, task: &Task) -> Outcome {
        if trajectory.environment_failure {
            return Outcome::Failure;
        }
        if trajectory.outcome != Outcome::Unknown {
            return trajectory.outcome;
        }
        match (&trajectory.final_answer, &task.reference_answer) {
            (Some(answer), Some(reference))
                if answer.trim().eq_ignore_ascii_case(reference.trim()) =>
            {
                Outcome::Success
            }
            _ => Outcome::Failure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Execution feedback only.
    #[default]
    Exploratory,
    /// The reflector also sees each task's reference answer.
    Imitative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Collapse every prompt into a single leaf and allow only rewrites.
    pub no_graph: bool,
    /// Allow only `REWRITE_NODE`.
    pub no_structural_edits: bool,
    /// Every deduplicated gradient is its own cluster.
    pub no_clustering: bool,
    /// Random groups, as many as density clustering would have found.
    pub random_clustering: bool,
    /// No retrieved exemplars in optimizer requests.
    pub no_grao: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationParams {
    /// Previously passing same-domain tasks re-run per proposal; 0 disables.
    pub spot_check: usize,
    /// Re-run every previously passing task instead of sampling.
    pub full_suite: bool,
    /// A proposal is accepted only if its effectiveness exceeds this.
    pub min_effectiveness: f64,
}

impl Default for ValidationParams {
    fn default() -> Self {
        Self {
            spot_check: 3,
            full_suite: false,
            min_effectiveness: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopParams {
    pub mode: Mode,
    pub max_iterations: u32,
    pub concurrency: usize,
    pub seed: u64,
    pub clustering: ClusteringParams,
    pub grao: GraoParams,
    pub validation: ValidationParams,
    pub ablations: Ablations,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            mode: Mode::Exploratory,
            max_iterations: 5,
            concurrency: 8,
            seed: 0,
            clustering: ClusteringParams::default(),
            grao: GraoParams::default(),
            validation: ValidationParams::default(),
            ablations: Ablations::default(),
        }
    }
}

/// Everything the loop talks to.
#[derive(Clone)]
pub struct Services {
    pub runner: Arc<dyn AgentRunner>,
    pub evaluator: Arc<dyn Evaluator>,
    pub reflector: ChatGateway,
    pub optimizer: ChatGateway,
    pub embedder: EmbeddingGateway,
    /// Shared with the gateways.
    pub ledger: UsageLedger,
    pub clock: Arc<dyn Clock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cluster_id: usize,
    pub representative: String,
    pub subset_task_ids: Vec<String>,
    pub fixed_count: usize,
    pub subset_size: usize,
    pub effectiveness: f64,
    pub spot_check_task_ids: Vec<String>,
    pub regressions: usize,
    pub accepted: bool,
    pub entry_id: String,
    /// Graph hash before the proposal and after the decision.
    pub hash_before: String,
    pub hash_after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub task_count: usize,
    pub passed_before: usize,
    pub passed_after: usize,
    pub success_before: f64,
    pub success_after: f64,
    pub gradient_count: usize,
    pub cluster_count: usize,
    pub noise_count: usize,
    pub proposals_attempted: usize,
    pub proposals_accepted: usize,
    pub proposals_rolled_back: usize,
    pub clusters_skipped: usize,
    /// Agent runs executed during the iteration.
    pub trajectories: u64,
    pub usage: UsageCounters,
    pub usage_by_role: std::collections::BTreeMap<crate::gateway::CallRole, UsageCounters>,
    pub wall_time_ms: u64,
}

impl IterationReport {
    pub fn fruitless(&self) -> bool {
        self.cluster_count == 0 || self.proposals_accepted == 0
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("task suite is empty")]
    EmptySuite,
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("imitative mode needs a reference answer for task `{0}`")]
    MissingReference(String),
    #[error("provider failure: {0}")]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("experience memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("archive {path}: {source}")]
    Storage {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    pub fn is_storage(&self) -> bool {
        matches!(
            self,
            RunError::Storage { .. }
                | RunError::Memory(MemoryError::Io { .. })
                | RunError::Cluster(ClusterError::Store { .. })
        )
    }
}

pub fn validate_suite(tasks: &[Task], mode: Mode) -> Result<(), RunError> {
    if tasks.is_empty() {
        return Err(RunError::EmptySuite);
    }
    let mut seen = BTreeSet::new();
    for t in tasks {
        if !seen.insert(t.task_id.as_str()) {
            return Err(RunError::DuplicateTask(t.task_id.clone()));
        }
        if mode == Mode::Imitative
            && t.reference_answer
                .as_deref()
                .is_none_or(|r| r.trim().is_empty())
        {
            return Err(RunError::MissingReference(t.task_id.clone()));
        }
    }
    Ok(())
}

/// Runs every task against the materialized graph with at most
/// `concurrency` runs in flight. Outcomes are set by `evaluator`; runner
/// errors become environment-failure trajectories. Sorted by task id.
pub fn run_batch(
    graph: &TextualParameterGraph,
    tasks: &[Task],
    runner: &dyn AgentRunner,
    evaluator: &dyn Evaluator,
    concurrency: usize,
) -> Result<Vec<Trajectory>, RunError> {
    if tasks.is_empty() {
        return Err(RunError::EmptySuite);
    }
    let config = graph.materialize_all();
    let mut out = parallel_map(tasks, concurrency, |task| {
        let mut t = runner.run(&config, task).unwrap_or_else(|e| {
            tracing::warn!(task = %task.task_id, error = %e, "environment failure");
            Trajectory::environment_failure(&task.task_id, &task.query, &e)
        });
        t.task_id = task.task_id.clone();
        t.outcome = evaluator.judge(&t, task);
        t
    });
    out.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient::{Step, StepKind};
    use crate::graph::{NodeKind, NodeTree};

    struct Echo;

    impl AgentRunner for Echo {
        fn run(&self, config: &MaterializedConfig, task: &Task) -> Result<Trajectory, String> {
            if task.query == "boom" {
                return Err("socket closed".into());
            }
            let text = config.concatenated();
            Ok(Trajectory {
                task_id: task.task_id.clone(),
                query: task.query.clone(),
                steps: vec![Step::new("agent", StepKind::Message, &text)],
                final_answer: Some(
                    if text.contains(&task.query) {
                        "yes"
                    } else {
                        "no"
                    }
                    .into(),
                ),
                outcome: Outcome::Unknown,
                usage: UsageCounters {
                    prompt_tokens: 2,
                    completion_tokens: 1,
                    ..Default::default()
                },
                duration: 0.0,
                environment_failure: false,
            })
        }
    }

    fn task(id: &str, query: &str) -> Task {
        Task {
            task_id: id.into(),
            query: query.into(),
            reference_answer: Some("yes".into()),
            domain_tag: None,
        }
    }

    fn graph() -> TextualParameterGraph {
        TextualParameterGraph::from_trees(
            vec![NodeTree::leaf("s", NodeKind::Generic, "alpha beta").with_id("s")],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn batch_is_sorted_and_schedule_independent() {
        let tasks: Vec<Task> = (0..10)
            .rev()
            .map(|i| {
                task(
                    &format!("t{i:02}"),
                    if i % 2 == 0 { "alpha" } else { "gamma" },
                )
            })
            .collect();
        let one = run_batch(&graph(), &tasks, &Echo, &DefaultEvaluator, 1).unwrap();
        let eight = run_batch(&graph(), &tasks, &Echo, &DefaultEvaluator, 8).unwrap();
        assert_eq!(one, eight);
        assert_eq!(one.len(), 10);
        assert!(one.windows(2).all(|w| w[0].task_id < w[1].task_id));
        assert_eq!(
            one.iter().filter(|t| t.outcome == Outcome::Success).count(),
            5
        );
        let total: UsageCounters = one.iter().map(|t| t.usage).sum();
        assert_eq!(total.total_tokens(), 30);
    }

    #[test]
    fn runner_errors_become_environment_failures() {
        let out = run_batch(&graph(), &[task("a", "boom")], &Echo, &DefaultEvaluator, 2).unwrap();
        assert!(out[0].environment_failure);
        assert_eq!(out[0].outcome, Outcome::Failure);
    }

    #[test]
    fn suite_validation() {
        assert!(matches!(
            validate_suite(&[], Mode::Exploratory),
            Err(RunError::EmptySuite)
        ));
        assert!(matches!(
            validate_suite(&[task("a", "q"), task("a", "r")], Mode::Exploratory),
            Err(RunError::DuplicateTask(_))
        ));
        let mut t = task("a", "q");
        t.reference_answer = None;
        assert!(matches!(
            validate_suite(&[t], Mode::Imitative),
            Err(RunError::MissingReference(_))
        ));
    }
}
