use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::archive::{Archive, IterationArtifacts, ProposalRecord, RunMeta, RunSummary};
use super::cost::{cost_report, CostSummary};
use super::{
    run_batch, validate_suite, IterationReport, LoopParams, Mode, RunError, Services, Task,
    ValidationReport,
};
use crate::cluster::{
    dbscan, dedupe, random_clusters, singleton_clusters, Clustering, EmbeddedGradient,
    GradientStore,
};
use crate::gateway::{CallRole, UsageCounters};
use crate::gradient::{reflect_batch, Outcome, Trajectory};
use crate::graph::proposal::{apply_proposal, EditScope};
use crate::graph::TextualParameterGraph;
use crate::memory::{
    rank_group, select_exemplars, ExemplarBlock, ExperienceEntry, ExperienceMemory,
};
use crate::optimizer::{propose, MemoryMode, ProposalRequest};

/// Result of a full optimization run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_graph: TextualParameterGraph,
    pub reports: Vec<IterationReport>,
    /// `None` when no agent run happened.
    pub cost: Option<CostSummary>,
}

/// Loop state: the live graph, task suite, memory and archive.
pub struct Evolution {
    params: LoopParams,
    services: Services,
    tasks: Vec<Task>,
    graph: TextualParameterGraph,
    memory: ExperienceMemory,
    archive: Option<Archive>,
    gradient_store: Option<GradientStore>,
    iteration: u32,
    runs: Cell<u64>,
    /// Batch already executed against the graph with this hash.
    cached_batch: Option<(String, Vec<Trajectory>)>,
    reports: Vec<IterationReport>,
}

fn passed(batch: &[Trajectory]) -> usize {
    batch
        .iter()
        .filter(|t| t.outcome == Outcome::Success)
        .count()
}

fn rate(passed: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        passed as f64 / total as f64
    }
}

impl Evolution {
    pub fn new(
        params: LoopParams,
        services: Services,
        tasks: Vec<Task>,
        graph: TextualParameterGraph,
        memory: ExperienceMemory,
        archive: Option<Archive>,
        fixture: Option<&str>,
    ) -> Result<Self, RunError> {
        validate_suite(&tasks, params.mode)?;
        let graph = if params.ablations.no_graph {
            graph.flatten()
        } else {
            graph
        };
        let gradient_store = archive
            .as_ref()
            .map(|a| GradientStore::new(a.root().join("gradients.jsonl")));
        let evolution = Self {
            params,
            services,
            tasks,
            graph,
            memory,
            archive,
            gradient_store,
            iteration: 0,
            runs: Cell::new(0),
            cached_batch: None,
            reports: Vec::new(),
        };
        if let Some(archive) = &evolution.archive {
            archive.write_meta(&RunMeta {
                schema: RunMeta::SCHEMA.to_string(),
                fixture: fixture.map(str::to_string),
                scope: evolution.scope(),
                params: evolution.params.clone(),
                task_ids: evolution.tasks.iter().map(|t| t.task_id.clone()).collect(),
                started_at: evolution.services.clock.now_ms(),
            })?;
        }
        Ok(evolution)
    }

    pub fn scope(&self) -> EditScope {
        let a = &self.params.ablations;
        if a.no_graph || a.no_structural_edits {
            EditScope::RewriteOnly
        } else {
            EditScope::Structural
        }
    }

    pub fn graph(&self) -> &TextualParameterGraph {
        &self.graph
    }

    pub fn memory(&self) -> &ExperienceMemory {
        &self.memory
    }

    pub fn reports(&self) -> &[IterationReport] {
        &self.reports
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    fn execute(
        &self,
        graph: &TextualParameterGraph,
        tasks: &[Task],
    ) -> Result<Vec<Trajectory>, RunError> {
        let out = run_batch(
            graph,
            tasks,
            self.services.runner.as_ref(),
            self.services.evaluator.as_ref(),
            self.params.concurrency,
        )?;
        for t in &out {
            self.services.ledger.record(CallRole::Agent, t.usage, 1);
        }
        self.runs.set(self.runs.get() + out.len() as u64);
        Ok(out)
    }

    fn cluster(&self, items: &[EmbeddedGradient]) -> Result<Clustering, RunError> {
        let ablations = &self.params.ablations;
        if ablations.no_clustering {
            return Ok(Clustering {
                clusters: singleton_clusters(items),
                noise: vec![],
            });
        }
        let density = dbscan(items, &self.params.clustering);
        if ablations.random_clustering && !items.is_empty() {
            let k = density.clusters.len().clamp(1, items.len());
            let seed = self.params.seed.wrapping_add(u64::from(self.iteration));
            return Ok(Clustering {
                clusters: random_clusters(items, k, seed)?,
                noise: vec![],
            });
        }
        Ok(density)
    }

    /// Previously passing tasks re-run to catch regressions.
    fn regression_pool(
        &self,
        current: &BTreeMap<String, Outcome>,
        subset: &[Task],
        cluster_id: usize,
    ) -> Vec<Task> {
        let v = &self.params.validation;
        let in_subset: BTreeSet<&str> = subset.iter().map(|t| t.task_id.as_str()).collect();
        let passing = self
            .tasks
            .iter()
            .filter(|t| !in_subset.contains(t.task_id.as_str()))
            .filter(|t| current.get(&t.task_id) == Some(&Outcome::Success));
        if v.full_suite {
            return passing.cloned().collect();
        }
        if v.spot_check == 0 {
            return Vec::new();
        }
        let domains: BTreeSet<Option<&str>> =
            subset.iter().map(|t| t.domain_tag.as_deref()).collect();
        let pool: Vec<&Task> = passing
            .filter(|t| domains.contains(&t.domain_tag.as_deref()))
            .collect();
        let seed = self
            .params
            .seed
            .wrapping_add(u64::from(self.iteration) << 20)
            .wrapping_add(cluster_id as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amount = v.spot_check.min(pool.len());
        let mut picked: Vec<usize> =
            rand::seq::index::sample(&mut rng, pool.len(), amount).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pool[i].clone()).collect()
    }

    /// One pass of the loop. Provider failures on a single cluster skip
    /// that cluster; storage failures abort.
    pub fn run_iteration(&mut self) -> Result<IterationReport, RunError> {
        self.iteration += 1;
        let n = self.iteration;
        let ledger_mark = self.services.ledger.len();
        let runs_mark = self.runs.get();
        let started = self.services.clock.now_ms();
        let graph_before = self.graph.clone();
        let tasks = self.tasks.clone();
        let task_by_id: BTreeMap<&str, &Task> =
            tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();

        let batch = match self.cached_batch.take() {
            Some((hash, batch)) if hash == graph_before.content_hash() => batch,
            _ => self.execute(&graph_before, &tasks)?,
        };
        let baseline: BTreeMap<String, Outcome> = batch
            .iter()
            .map(|t| (t.task_id.clone(), t.outcome))
            .collect();
        let passed_before = passed(&batch);
        let mut current = baseline.clone();

        let reflect_items: Vec<(&Trajectory, Option<&str>)> = batch
            .iter()
            .map(|t| {
                let reference = match self.params.mode {
                    Mode::Imitative => task_by_id[t.task_id.as_str()].reference_answer.as_deref(),
                    Mode::Exploratory => None,
                };
                (t, reference)
            })
            .collect();
        let reflections = reflect_batch(
            &reflect_items,
            &self.services.reflector,
            self.params.concurrency,
        );

        let mut texts = Vec::new();
        let mut sources = Vec::new();
        for r in &reflections {
            if let Some(g) = &r.gradient {
                for negative in &g.negative {
                    texts.push(negative.clone());
                    sources.push(r.task_id.clone());
                }
            }
        }
        let vectors = self.services.embedder.embed(&texts)?;
        let embedded: Vec<EmbeddedGradient> = texts
            .into_iter()
            .zip(vectors)
            .zip(sources)
            .map(|((text, vector), source)| EmbeddedGradient::new(text, vector, source))
            .collect();
        let deduped = dedupe(&embedded, self.params.clustering.dedupe_threshold);
        if let Some(store) = &self.gradient_store {
            store.append(n, &deduped)?;
        }
        let mut clustering = self.cluster(&deduped)?;
        clustering
            .clusters
            .sort_by_key(|c| std::cmp::Reverse(c.len()));

        let scope = self.scope();
        let mut validations = Vec::new();
        let mut proposals = Vec::new();
        let (mut accepted_count, mut rolled_back, mut skipped) = (0, 0, 0);
        for (cluster_id, cluster) in clustering.clusters.iter().enumerate() {
            let subset: Vec<Task> = tasks
                .iter()
                .filter(|t| {
                    cluster.member_tasks.contains(&t.task_id)
                        && baseline[&t.task_id] == Outcome::Failure
                })
                .cloned()
                .collect();
            if subset.is_empty() {
                skipped += 1;
                proposals.push(ProposalRecord::skipped(
                    cluster_id,
                    cluster,
                    "no previously failing source task",
                ));
                continue;
            }
            let context_vector = cluster
                .members
                .iter()
                .find(|m| m.text == cluster.representative)
                .expect("representative is a member")
                .vector
                .clone();
            let (exemplars, mode) = if self.params.ablations.no_grao {
                (ExemplarBlock::default(), MemoryMode::WithoutMemory)
            } else {
                let group = rank_group(self.memory.retrieve(&context_vector, self.params.grao.k));
                (
                    select_exemplars(&group, &self.params.grao),
                    MemoryMode::WithMemory,
                )
            };
            let request =
                ProposalRequest::new(&self.graph, cluster.clone(), exemplars, mode, scope);
            let proposal = match propose(&request, &self.services.optimizer) {
                Ok(p) => p,
                Err(e) => {
                    tracing::warn!(iteration = n, cluster_id, error = %e, "no usable proposal, cluster skipped");
                    skipped += 1;
                    proposals.push(ProposalRecord::skipped(cluster_id, cluster, &e.to_string()));
                    continue;
                }
            };
            let hash_before = self.graph.content_hash();
            let candidate = match apply_proposal(&self.graph, &proposal, scope) {
                Ok(g) => g,
                Err(e) => {
                    tracing::warn!(iteration = n, cluster_id, error = %e, "proposal does not apply, cluster skipped");
                    skipped += 1;
                    proposals.push(ProposalRecord::skipped(cluster_id, cluster, &e.to_string()));
                    continue;
                }
            };

            let subset_runs = self.execute(&candidate, &subset)?;
            let fixed = passed(&subset_runs);
            let effectiveness = fixed as f64 / subset.len() as f64;
            let promising = effectiveness > self.params.validation.min_effectiveness;
            let spot = if promising {
                self.regression_pool(&current, &subset, cluster_id)
            } else {
                Vec::new()
            };
            let spot_runs = if spot.is_empty() {
                Vec::new()
            } else {
                self.execute(&candidate, &spot)?
            };
            let regressions = spot_runs.len() - passed(&spot_runs);
            let accepted = promising && regressions == 0;
            if accepted {
                self.graph = candidate;
                for t in subset_runs.iter().chain(&spot_runs) {
                    current.insert(t.task_id.clone(), t.outcome);
                }
                accepted_count += 1;
            } else {
                rolled_back += 1;
            }
            let hash_after = self.graph.content_hash();
            if !accepted {
                assert_eq!(
                    hash_after, hash_before,
                    "rejected proposal must leave the graph untouched"
                );
            }
            tracing::info!(
                iteration = n,
                cluster_id,
                effectiveness,
                regressions,
                accepted,
                "proposal validated"
            );

            let entry_id = self.memory.record(ExperienceEntry {
                entry_id: String::new(),
                problem_context: cluster.representative.clone(),
                context_vector,
                proposal: proposal.clone(),
                effectiveness,
                accepted,
                iteration: n,
                created_at: self.services.clock.now_ms(),
            })?;
            validations.push(ValidationReport {
                cluster_id,
                representative: cluster.representative.clone(),
                subset_task_ids: subset.iter().map(|t| t.task_id.clone()).collect(),
                fixed_count: fixed,
                subset_size: subset.len(),
                effectiveness,
                spot_check_task_ids: spot.iter().map(|t| t.task_id.clone()).collect(),
                regressions,
                accepted,
                entry_id,
                hash_before,
                hash_after,
            });
            proposals.push(ProposalRecord {
                cluster_id,
                representative: cluster.representative.clone(),
                proposal: Some(proposal),
                error: None,
                accepted,
                effectiveness: Some(effectiveness),
            });
        }

        let after_batch = if accepted_count > 0 {
            let graph = self.graph.clone();
            self.execute(&graph, &tasks)?
        } else {
            batch
        };
        let passed_after = passed(&after_batch);
        self.cached_batch = Some((self.graph.content_hash(), after_batch));

        let calls = self.services.ledger.since(ledger_mark);
        let mut usage_by_role: BTreeMap<CallRole, UsageCounters> = BTreeMap::new();
        for c in &calls {
            *usage_by_role.entry(c.role).or_default() += c.usage;
        }
        let report = IterationReport {
            iteration: n,
            task_count: tasks.len(),
            passed_before,
            passed_after,
            success_before: rate(passed_before, tasks.len()),
            success_after: rate(passed_after, tasks.len()),
            gradient_count: deduped.len(),
            cluster_count: clustering.clusters.len(),
            noise_count: clustering.noise.len(),
            proposals_attempted: accepted_count + rolled_back,
            proposals_accepted: accepted_count,
            proposals_rolled_back: rolled_back,
            clusters_skipped: skipped,
            trajectories: self.runs.get() - runs_mark,
            usage: calls.iter().map(|c| c.usage).sum(),
            usage_by_role,
            wall_time_ms: self.services.clock.now_ms().saturating_sub(started),
        };
        if let Some(archive) = &self.archive {
            archive.write_iteration(
                n,
                &IterationArtifacts {
                    graph_before: &graph_before,
                    graph_after: &self.graph,
                    reflections: &reflections,
                    clustering: &clustering,
                    proposals: &proposals,
                    validations: &validations,
                    report: &report,
                },
            )?;
        }
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Iterates until `max_iterations` or two fruitless iterations in a row.
    pub fn optimize(&mut self) -> Result<RunOutcome, RunError> {
        let mut fruitless = 0;
        while self.iteration < self.params.max_iterations {
            let report = self.run_iteration()?;
            if report.fruitless() {
                fruitless += 1;
                if fruitless >= 2 {
                    tracing::info!(
                        iteration = report.iteration,
                        "two fruitless iterations, stopping"
                    );
                    break;
                }
            } else {
                fruitless = 0;
            }
        }
        let cost = cost_report(&self.reports).ok();
        if let Some(archive) = &self.archive {
            archive.write_final(
                &self.graph,
                &RunSummary {
                    iterations: self.reports.clone(),
                    cost: cost.clone(),
                    final_graph_hash: self.graph.content_hash(),
                    memory_entries: self.memory.len(),
                },
            )?;
        }
        Ok(RunOutcome {
            final_graph: self.graph.clone(),
            reports: self.reports.clone(),
            cost,
        })
    }
}
