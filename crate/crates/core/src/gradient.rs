//! Trajectories and the textual gradients the reflector distills from them.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatGateway, ChatMessage, GatewayError, UsageCounters};
use crate::template::PromptTemplate;
use crate::util::{extract_json_object, parallel_map};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Reasoning,
    ToolCall,
    ToolResult,
    Message,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub actor: String,
    pub kind: StepKind,
    pub payload: String,
}

impl Step {
    pub fn new(actor: impl Into<String>, kind: StepKind, payload: impl Into<String>) -> Self {
        Self {
            actor: actor.into(),
            kind,
            payload: payload.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub query: String,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub final_answer: Option<String>,
    pub outcome: Outcome,
    #[serde(default)]
    pub usage: UsageCounters,
    /// Seconds.
    #[serde(default)]
    pub duration: f64,
    /// The run broke for reasons outside the agent (transport, tool
    /// infrastructure); such runs are never reflected on.
    #[serde(default)]
    pub environment_failure: bool,
}

impl Trajectory {
    /// A run that never produced agent behavior.
    pub fn environment_failure(task_id: &str, query: &str, error: &str) -> Self {
        Self {
            task_id: task_id.to_string(),
            query: query.to_string(),
            steps: vec![Step::new(
                "environment",
                StepKind::ToolResult,
                format!("environment error: {error}"),
            )],
            final_answer: None,
            outcome: Outcome::Failure,
            usage: UsageCounters::default(),
            duration: 0.0,
            environment_failure: true,
        }
    }

    pub fn wall_time(&self) -> Duration {
        Duration::from_secs_f64(self.duration.max(0.0))
    }

    /// Plain-text transcript handed to the reflector.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            let kind = serde_json::to_value(step.kind).expect("kind serializes");
            out.push_str(&format!(
                "[{}] {} ({}): {}\n",
                i + 1,
                step.actor,
                kind.as_str().unwrap_or_default(),
                step.payload
            ));
        }
        if let Some(answer) = &self.final_answer {
            out.push_str(&format!("Final answer: {answer}\n"));
        }
        let outcome = serde_json::to_value(self.outcome).expect("outcome serializes");
        out.push_str(&format!(
            "Outcome: {}",
            outcome.as_str().unwrap_or_default()
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualGradient {
    pub source_task: String,
    pub summary: String,
    /// Failure patterns with corrective suggestions.
    pub negative: Vec<String>,
    /// Patterns worth keeping.
    pub positive: Vec<String>,
    #[serde(default)]
    pub low_information: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReflectionError {
    #[error("no JSON object in reflector output")]
    NoJson,
    #[error("reflector output is not valid JSON: {0}")]
    Json(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` has the wrong type, expected {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
}

fn string_list(
    doc: &serde_json::Map<String, Value>,
    field: &'static str,
) -> Result<Vec<String>, ReflectionError> {
    let value = doc.get(field).ok_or(ReflectionError::MissingField(field))?;
    let wrong = ReflectionError::WrongType {
        field,
        expected: "a list of strings",
    };
    let items = value.as_array().ok_or(wrong.clone())?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let s = item.as_str().ok_or(wrong.clone())?.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    }
    Ok(out)
}

/// Parses a reflector reply (`summary`, `error_list`, `experience_list`).
/// Unknown fields are ignored. `source_task` is left empty.
pub fn parse_reflection(raw: &str) -> Result<TextualGradient, ReflectionError> {
    let json = extract_json_object(raw).ok_or(ReflectionError::NoJson)?;
    let value: Value =
        serde_json::from_str(json).map_err(|e| ReflectionError::Json(e.to_string()))?;
    let doc = value.as_object().ok_or(ReflectionError::NoJson)?;
    let summary = doc
        .get("summary")
        .ok_or(ReflectionError::MissingField("summary"))?
        .as_str()
        .ok_or(ReflectionError::WrongType {
            field: "summary",
            expected: "a string",
        })?
        .trim()
        .to_string();
    Ok(TextualGradient {
        source_task: String::new(),
        summary,
        negative: string_list(doc, "error_list")?,
        positive: string_list(doc, "experience_list")?,
        low_information: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionStatus {
    Informative,
    /// Parsed, but a failed run produced no failure pattern (or nothing at all).
    LowInformation,
    /// The reply stayed off-schema after one repair request.
    SchemaSkipped,
    /// Environment failure; the reflector was not called.
    Excluded,
    TransportFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub task_id: String,
    pub status: ReflectionStatus,
    #[serde(default)]
    pub gradient: Option<TextualGradient>,
    /// Entries dropped because they contained the reference answer.
    #[serde(default)]
    pub leaked_entries_dropped: usize,
    #[serde(default)]
    pub issues: Vec<String>,
}

impl Reflection {
    fn without_gradient(task_id: &str, status: ReflectionStatus, issues: Vec<String>) -> Self {
        Self {
            task_id: task_id.to_string(),
            status,
            gradient: None,
            leaked_entries_dropped: 0,
            issues,
        }
    }
}

/// Reflects on one trajectory. A reference answer switches to imitative
/// mode: it is shown to the reflector, and any returned entry that repeats
/// it verbatim is discarded.
pub fn reflect(
    trajectory: &Trajectory,
    reference_answer: Option<&str>,
    reflector: &ChatGateway,
) -> Result<Reflection, GatewayError> {
    reflect_with(
        trajectory,
        reference_answer,
        reflector,
        &PromptTemplate::reflector(),
    )
}

pub fn reflect_with(
    trajectory: &Trajectory,
    reference_answer: Option<&str>,
    reflector: &ChatGateway,
    template: &PromptTemplate,
) -> Result<Reflection, GatewayError> {
    if trajectory.environment_failure {
        return Ok(Reflection::without_gradient(
            &trajectory.task_id,
            ReflectionStatus::Excluded,
            vec![],
        ));
    }
    let reference = reference_answer.map(str::trim).filter(|r| !r.is_empty());
    let rendered = trajectory.render();
    let user = template
        .render_user(&[
            ("task", Some(&trajectory.query)),
            ("trajectory", Some(&rendered)),
            ("reference_answer", reference),
        ])
        .expect("reflector template placeholders are supplied");
    let mut messages = vec![
        ChatMessage::system(&template.system),
        ChatMessage::user(user),
    ];
    let mut issues = Vec::new();
    for attempt in 0..2 {
        let reply = reflector.chat(&messages)?.response;
        match parse_reflection(&reply) {
            Ok(mut gradient) => {
                gradient.source_task = trajectory.task_id.clone();
                let mut dropped = 0;
                if let Some(reference) = reference {
                    for list in [&mut gradient.negative, &mut gradient.positive] {
                        let before = list.len();
                        list.retain(|e| !e.contains(reference));
                        dropped += before - list.len();
                    }
                    if dropped > 0 {
                        tracing::warn!(task = %trajectory.task_id, dropped, "reflection repeated the reference answer");
                    }
                }
                let failed = trajectory.outcome == Outcome::Failure;
                gradient.low_information = (failed && gradient.negative.is_empty())
                    || (gradient.negative.is_empty() && gradient.positive.is_empty());
                let status = if gradient.low_information {
                    ReflectionStatus::LowInformation
                } else {
                    ReflectionStatus::Informative
                };
                return Ok(Reflection {
                    task_id: trajectory.task_id.clone(),
                    status,
                    gradient: Some(gradient),
                    leaked_entries_dropped: dropped,
                    issues,
                });
            }
            Err(e) => {
                tracing::warn!(task = %trajectory.task_id, attempt, error = %e, "reflection off-schema");
                issues.push(e.to_string());
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "That reply does not match the required format ({e}). Reply with only a JSON object \
                     with the fields \"summary\" (string), \"error_list\" (list of strings) and \
                     \"experience_list\" (list of strings)."
                )));
            }
        }
    }
    Ok(Reflection::without_gradient(
        &trajectory.task_id,
        ReflectionStatus::SchemaSkipped,
        issues,
    ))
}

/// Reflects on a batch with bounded concurrency. Transport failures are
/// captured per trajectory; output is sorted by task id.
pub fn reflect_batch<'a>(
    items: &[(&'a Trajectory, Option<&'a str>)],
    reflector: &ChatGateway,
    concurrency: usize,
) -> Vec<Reflection> {
    let mut out = parallel_map(items, concurrency, |(trajectory, reference)| {
        reflect(trajectory, *reference, reflector).unwrap_or_else(|e| {
            tracing::warn!(task = %trajectory.task_id, error = %e, "reflection transport failure");
            Reflection::without_gradient(
                &trajectory.task_id,
                ReflectionStatus::TransportFailed,
                vec![e.to_string()],
            )
        })
    });
    out.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    out
}
