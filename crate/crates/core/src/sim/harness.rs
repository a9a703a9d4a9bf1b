use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::gateway::UsageCounters;
use crate::gradient::{Outcome, Step, StepKind, Trajectory};
use crate::graph::MaterializedConfig;
use crate::orchestrator::{AgentRunner, Task};
use crate::util::estimate_tokens;

/// A task that succeeds exactly when every required marker appears in the
/// materialized configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub query: String,
    pub required_markers: BTreeSet<String>,
    pub failure_family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl SyntheticTask {
    pub fn task(&self) -> Task {
        Task {
            task_id: self.task_id.clone(),
            query: self.query.clone(),
            reference_answer: Some(format!("answer-{}", self.task_id)),
            domain_tag: self.domain_tag.clone(),
        }
    }
}

/// The last step of a failed run; reflector scripts key on the
/// `family=<name>` tag.
pub fn failure_description(family: &str) -> String {
    format!("FAILURE [family={family}]: the reply was rejected because the {family} requirement was not met.")
}

pub fn rule_run(config: &MaterializedConfig, task: &SyntheticTask) -> Trajectory {
    let text = config.concatenated();
    let missing: Vec<&str> = task
        .required_markers
        .iter()
        .filter(|m| !text.contains(m.as_str()))
        .map(String::as_str)
        .collect();
    let success = missing.is_empty();
    let answer = if success {
        format!("answer-{}", task.task_id)
    } else {
        "unknown".to_string()
    };
    let mut steps = vec![
        Step::new(
            "agent",
            StepKind::Reasoning,
            format!("Plan: address the query \"{}\".", task.query),
        ),
        Step::new("agent", StepKind::Message, format!("Draft reply: {answer}")),
    ];
    steps.push(if success {
        Step::new(
            "evaluator",
            StepKind::Message,
            "SUCCESS: every required instruction was followed.",
        )
    } else {
        Step::new(
            "evaluator",
            StepKind::Message,
            failure_description(&task.failure_family),
        )
    });
    let completion: u64 = steps.iter().map(|s| estimate_tokens(&s.payload)).sum();
    Trajectory {
        task_id: task.task_id.clone(),
        query: task.query.clone(),
        steps,
        final_answer: Some(answer),
        outcome: if success {
            Outcome::Success
        } else {
            Outcome::Failure
        },
        usage: UsageCounters {
            prompt_tokens: estimate_tokens(&text) + estimate_tokens(&task.query),
            completion_tokens: completion,
            wall_time: Default::default(),
        },
        duration: 0.0,
        environment_failure: false,
    }
}

/// [`AgentRunner`] over a fixed set of synthetic tasks.
#[derive(Debug, Clone)]
pub struct RuleRunner {
    tasks: BTreeMap<String, SyntheticTask>,
}

impl RuleRunner {
    pub fn new(tasks: &[SyntheticTask]) -> Self {
        Self {
            tasks: tasks
                .iter()
                .map(|t| (t.task_id.clone(), t.clone()))
                .collect(),
        }
    }
}

impl AgentRunner for RuleRunner {
    fn run(&self, config: &MaterializedConfig, task: &Task) -> Result<Trajectory, String> {
        let synthetic = self
            .tasks
            .get(&task.task_id)
            .ok_or_else(|| format!("unknown synthetic task `{}`", task.task_id))?;
        Ok(rule_run(config, synthetic))
    }
}
