//! Offline suites: initial graph, synthetic tasks, and the reflector and
//! optimizer scripts that drive them.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::harness::{RuleRunner, SyntheticTask};
use super::scripted::{ChatScript, Condition, ScriptRule, ScriptedChat, ScriptedResponse};
use crate::gateway::{CallRole, ChatGateway, EmbeddingGateway, GatewayEnv, ModelConfig};
use crate::graph::{GraphError, NodeKind, NodeTree, TextualParameterGraph};
use crate::orchestrator::{DefaultEvaluator, Services, Task};

pub const FIXTURE_NAMES: [&str; 3] = ["convergence", "poisoned", "stability"];

const BASE: &str = "Answer the question directly.";
const ROLE: &str = "You are a research assistant that answers user questions.";
const ANCHOR: &str = "Error cluster:";
const EXEMPLAR_HEADER: &str = "Earlier optimization attempts on similar problems";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteBundle {
    pub name: String,
    /// Run seed (spot-check sampling, random clustering).
    pub seed: u64,
    /// Seed of the hashing embedder; fixed per fixture.
    pub embedding_seed: u64,
    pub roots: Vec<NodeTree>,
    pub tasks: Vec<SyntheticTask>,
    pub reflector: ChatScript,
    pub optimizer: ChatScript,
}

/// Offline services for a bundle plus handles on its scripted providers.
pub struct SimServices {
    pub services: Services,
    pub reflector: Arc<ScriptedChat>,
    pub optimizer: Arc<ScriptedChat>,
}

impl SuiteBundle {
    pub fn graph(&self) -> Result<TextualParameterGraph, GraphError> {
        TextualParameterGraph::from_trees(self.roots.clone(), vec![])
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.tasks.iter().map(SyntheticTask::task).collect()
    }

    pub fn services(&self, env: GatewayEnv) -> SimServices {
        let reflector = Arc::new(ScriptedChat::from_script(self.reflector.clone()));
        let optimizer = Arc::new(ScriptedChat::from_script(self.optimizer.clone()));
        let model = ModelConfig::named("scripted");
        let services = Services {
            runner: Arc::new(RuleRunner::new(&self.tasks)),
            evaluator: Arc::new(DefaultEvaluator),
            reflector: ChatGateway::new(
                reflector.clone(),
                model.clone(),
                CallRole::Reflector,
                env.clone(),
            ),
            optimizer: ChatGateway::new(optimizer.clone(), model, CallRole::Optimizer, env.clone()),
            embedder: EmbeddingGateway::hashing(self.embedding_seed, env.clone()),
            ledger: env.ledger.clone(),
            clock: env.clock.clone(),
        };
        SimServices {
            services,
            reflector,
            optimizer,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundles serialize");
        s.push('\n');
        s
    }
}

/// The shipped fixture file for `name`.
pub fn fixture_file(name: &str) -> Option<&'static str> {
    match name {
        "convergence" => Some(include_str!("../../fixtures/convergence.json")),
        "poisoned" => Some(include_str!("../../fixtures/poisoned.json")),
        "stability" => Some(include_str!("../../fixtures/stability.json")),
        _ => None,
    }
}

/// Loads a shipped fixture and sets its run seed.
pub fn fixture(name: &str, seed: u64) -> Option<SuiteBundle> {
    let mut bundle: SuiteBundle =
        serde_json::from_str(fixture_file(name)?).expect("shipped fixtures parse");
    bundle.seed = seed;
    Some(bundle)
}

struct Family {
    name: &'static str,
    marker: &'static str,
    /// Text that identifies the family inside a rendered error cluster.
    keyword: &'static str,
    gradients: [&'static str; 2],
    node_title: &'static str,
}

const VERIFICATION: Family = Family {
    name: "verification",
    marker: "Verify every candidate answer against all stated constraints.",
    keyword: "stated constraint",
    gradients: [
        "The agent did not verify its candidate answer against every stated constraint before replying.",
        "The agent never checked its candidate answer against every stated constraint before replying.",
    ],
    node_title: "Verification",
};

const TOOLS: Family = Family {
    name: "tools",
    marker: "Use the search tool before stating any fact.",
    keyword: "search tool",
    gradients: [
        "The agent stated facts from memory without calling the search tool first.",
        "The agent stated facts from memory and skipped calling the search tool.",
    ],
    node_title: "Tool Use",
};

const FORMAT: Family = Family {
    name: "format",
    marker: "Put the final answer on its own line prefixed with ANSWER:",
    keyword: "ANSWER line",
    gradients: [
        "The final answer was buried in prose instead of on a separate ANSWER line.",
        "The final answer was buried in prose rather than placed on a separate ANSWER line.",
    ],
    node_title: "Answer Format",
};

const CITATIONS: Family = Family {
    name: "citations",
    marker: "Cite a source for every claim.",
    keyword: "citing",
    gradients: [
        "The agent made claims without citing a source for each claim.",
        "The agent made claims without citing any source for each claim.",
    ],
    node_title: "Citations",
};

const UNITS: Family = Family {
    name: "units",
    marker: "Report every quantity with its unit.",
    keyword: "unit",
    gradients: [
        "The agent reported each quantity without stating its unit.",
        "The agent reported every quantity without stating its unit.",
    ],
    node_title: "Units",
};

fn initial_roots() -> Vec<NodeTree> {
    vec![NodeTree::internal(
        "Main Agent",
        NodeKind::Role,
        vec![
            NodeTree::leaf("Role", NodeKind::Role, ROLE).with_id("main.0"),
            NodeTree::leaf("Approach", NodeKind::Logic, BASE).with_id("main.1"),
        ],
    )
    .with_id("main")]
}

fn task(id: &str, query: &str, markers: &[&str], family: &str, domain: &str) -> SyntheticTask {
    SyntheticTask {
        task_id: id.to_string(),
        query: query.to_string(),
        required_markers: markers
            .iter()
            .map(|m| m.to_string())
            .collect::<BTreeSet<_>>(),
        failure_family: family.to_string(),
        domain_tag: Some(domain.to_string()),
    }
}

fn reply(value: serde_json::Value) -> ScriptedResponse {
    ScriptedResponse::reply(serde_json::to_string(&value).expect("json"))
}

fn reflection_rule(f: &Family) -> ScriptRule {
    ScriptRule::new(
        vec![Condition::Contains(format!("family={}", f.name))],
        vec![reply(json!({
            "summary": format!("The run failed on the {} requirement.", f.name),
            "error_list": f.gradients,
            "experience_list": [],
        }))],
    )
}

fn success_rule() -> ScriptRule {
    ScriptRule::new(
        vec![Condition::Contains("Outcome: success".into())],
        vec![reply(json!({
            "summary": "The run met every requirement.",
            "error_list": [],
            "experience_list": ["The agent followed every configured instruction."],
        }))],
    )
}

fn reflector_script(families: &[&Family]) -> ChatScript {
    let mut rules: Vec<ScriptRule> = families.iter().map(|f| reflection_rule(f)).collect();
    rules.push(success_rule());
    ChatScript {
        name: "reflector".into(),
        strict: true,
        rules,
    }
}

fn cluster_condition(f: &Family) -> Condition {
    Condition::ContainsAfter {
        anchor: ANCHOR.into(),
        text: f.keyword.into(),
    }
}

fn add_node(f: &Family) -> ScriptedResponse {
    reply(json!({
        "problem_context": format!("Runs fail the {} requirement because no instruction covers it.", f.name),
        "modifications": [{
            "operation": "ADD_NODE",
            "target": {"parent": "main"},
            "new_node": {"title": f.node_title, "type": "logic", "content": f.marker},
            "addresses_errors": [0, 1],
            "rationale": format!("Adds the missing {} instruction.", f.name),
        }],
    }))
}

fn rewrite_base(f: &Family) -> ScriptedResponse {
    reply(json!({
        "problem_context": format!("Runs fail the {} requirement because no instruction covers it.", f.name),
        "modifications": [{
            "operation": "REWRITE_NODE",
            "target": "main.1",
            "new_content": format!("{BASE}\n{}", f.marker),
            "addresses_errors": [0, 1],
            "rationale": format!("Folds the {} instruction into the approach.", f.name),
        }],
    }))
}

fn delete_base() -> ScriptedResponse {
    reply(json!({
        "problem_context": "The approach node distracts the agent from tool use.",
        "modifications": [{
            "operation": "DELETE_NODE",
            "target": "main.1",
            "addresses_errors": [0, 1],
            "rationale": "Removes the approach node.",
        }],
    }))
}

fn optimizer_script(rules: Vec<ScriptRule>) -> ChatScript {
    ChatScript {
        name: "optimizer".into(),
        strict: true,
        rules,
    }
}

fn convergence_tasks() -> Vec<SyntheticTask> {
    let r = "research";
    vec![
        task("t01", "Who founded the observatory?", &[BASE], "base", r),
        task(
            "t02",
            "Which venue satisfies all three booking constraints?",
            &[BASE, VERIFICATION.marker],
            "verification",
            r,
        ),
        task(
            "t03",
            "Which route meets the time and cost limits?",
            &[BASE, VERIFICATION.marker],
            "verification",
            r,
        ),
        task(
            "t04",
            "What is the capital of the region?",
            &[BASE],
            "base",
            r,
        ),
        task(
            "t05",
            "When was the bridge last renovated?",
            &[BASE, TOOLS.marker],
            "tools",
            r,
        ),
        task(
            "t06",
            "What is the current population of the town?",
            &[BASE, TOOLS.marker],
            "tools",
            r,
        ),
        task("t07", "Which river crosses the city?", &[BASE], "base", r),
        task(
            "t08",
            "How many moons does the planet have?",
            &[BASE, FORMAT.marker],
            "format",
            r,
        ),
        task(
            "t09",
            "What year was the treaty signed?",
            &[BASE, FORMAT.marker],
            "format",
            r,
        ),
        task("t10", "Who wrote the field guide?", &[BASE], "base", r),
    ]
}

/// Ten tasks, three failure families, four tasks passing initially. Each
/// family's cluster is fixed by one added node.
pub fn build_convergence_suite(seed: u64) -> SuiteBundle {
    let families = [&VERIFICATION, &TOOLS, &FORMAT];
    SuiteBundle {
        name: "convergence".into(),
        seed,
        embedding_seed: 0,
        roots: initial_roots(),
        tasks: convergence_tasks(),
        reflector: reflector_script(&families),
        optimizer: optimizer_script(
            families
                .iter()
                .map(|f| ScriptRule::new(vec![cluster_condition(f)], vec![add_node(f)]))
                .collect(),
        ),
    }
}

/// The convergence suite with a tools proposal that deletes the base
/// instruction, which every task needs.
pub fn build_poisoned_suite(seed: u64) -> SuiteBundle {
    let mut bundle = build_convergence_suite(seed);
    bundle.name = "poisoned".into();
    bundle.optimizer = optimizer_script(
        [&VERIFICATION, &TOOLS, &FORMAT]
            .iter()
            .map(|f| {
                let response = if f.name == TOOLS.name {
                    delete_base()
                } else {
                    add_node(f)
                };
                ScriptRule::new(vec![cluster_condition(f)], vec![response])
            })
            .collect(),
    );
    bundle
}

/// Two families in two domains. Without exemplars the optimizer folds each
/// fix into the shared base node, undoing the other family's fix; with
/// exemplars it adds a separate node.
pub fn build_stability_suite(seed: u64) -> SuiteBundle {
    let families = [&CITATIONS, &UNITS];
    let mut rules: Vec<ScriptRule> = families
        .iter()
        .map(|f| {
            ScriptRule::new(
                vec![
                    Condition::Contains(EXEMPLAR_HEADER.into()),
                    cluster_condition(f),
                ],
                vec![add_node(f)],
            )
        })
        .collect();
    rules.extend(
        families
            .iter()
            .map(|f| ScriptRule::new(vec![cluster_condition(f)], vec![rewrite_base(f)])),
    );
    SuiteBundle {
        name: "stability".into(),
        seed,
        embedding_seed: 0,
        roots: initial_roots(),
        tasks: vec![
            task(
                "s01",
                "Summarize the findings of the survey.",
                &[BASE, CITATIONS.marker],
                "citations",
                "facts",
            ),
            task(
                "s02",
                "What caused the outage?",
                &[BASE, CITATIONS.marker],
                "citations",
                "facts",
            ),
            task(
                "s03",
                "Who discovered the compound?",
                &[BASE, CITATIONS.marker],
                "citations",
                "facts",
            ),
            task(
                "s04",
                "Name the largest lake in the park.",
                &[BASE],
                "citations",
                "facts",
            ),
            task(
                "s05",
                "How far apart are the two stations?",
                &[BASE, UNITS.marker],
                "units",
                "math",
            ),
            task(
                "s06",
                "What is the tank's capacity?",
                &[BASE, UNITS.marker],
                "units",
                "math",
            ),
            task("s07", "What is seven times six?", &[BASE], "units", "math"),
            task(
                "s08",
                "What is the square root of 81?",
                &[BASE],
                "units",
                "math",
            ),
        ],
        reflector: reflector_script(&families),
        optimizer: optimizer_script(rules),
    }
}

/// Builds a fixture from code; the shipped files are this output at seed 0.
pub fn build_fixture(name: &str, seed: u64) -> Option<SuiteBundle> {
    match name {
        "convergence" => Some(build_convergence_suite(seed)),
        "poisoned" => Some(build_poisoned_suite(seed)),
        "stability" => Some(build_stability_suite(seed)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{dbscan, dedupe, ClusteringParams, EmbeddedGradient};
    use crate::gateway::{cosine_similarity, HashEmbedder};

    #[test]
    fn shipped_files_match_builders() {
        for name in FIXTURE_NAMES {
            assert_eq!(
                fixture_file(name).unwrap(),
                build_fixture(name, 0).unwrap().to_json(),
                "{name}"
            );
        }
    }

    #[test]
    fn family_gradients_cluster_apart() {
        let all = [&VERIFICATION, &TOOLS, &FORMAT, &CITATIONS, &UNITS];
        let embedder = HashEmbedder::new(0);
        let vector =
            |s: &str| crate::gateway::EmbeddingVector::normalized(embedder.raw_vector(s)).unwrap();
        for (i, a) in all.iter().enumerate() {
            let same = cosine_similarity(&vector(a.gradients[0]), &vector(a.gradients[1])).unwrap();
            assert!((0.7..0.95).contains(&same), "{} {same}", a.name);
            for b in &all[i + 1..] {
                for x in a.gradients {
                    for y in b.gradients {
                        let c = cosine_similarity(&vector(x), &vector(y)).unwrap();
                        assert!(c < 0.7, "{} vs {}: {c}", a.name, b.name);
                    }
                }
            }
        }
        let items: Vec<EmbeddedGradient> = [&VERIFICATION, &TOOLS, &FORMAT]
            .iter()
            .flat_map(|f| f.gradients)
            .enumerate()
            .map(|(i, g)| EmbeddedGradient::new(g, vector(g), format!("t{i}")))
            .collect();
        let params = ClusteringParams::default();
        let kept = dedupe(&items, params.dedupe_threshold);
        assert_eq!(kept.len(), 6);
        assert_eq!(dbscan(&kept, &params).clusters.len(), 3);
    }

    #[test]
    fn initial_graph_passes_four_of_ten() {
        let b = build_convergence_suite(0);
        let config = b.graph().unwrap().materialize_all();
        let passing: Vec<&str> = b
            .tasks
            .iter()
            .filter(|t| {
                super::super::rule_run(&config, t).outcome == crate::gradient::Outcome::Success
            })
            .map(|t| t.task_id.as_str())
            .collect();
        assert_eq!(passing, ["t01", "t04", "t07", "t10"]);
    }
}
