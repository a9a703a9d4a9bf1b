//! Proposal generation for one error cluster through the optimizer role.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ErrorCluster;
use crate::gateway::{ChatGateway, ChatMessage, GatewayError};
use crate::graph::proposal::{EditScope, LowerError, OptimizationProposal};
use crate::graph::{deserialize, GraphEdit, GraphError, TextualParameterGraph};
use crate::memory::ExemplarBlock;
use crate::template::PromptTemplate;
use crate::util::extract_json_object;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    #[default]
    WithMemory,
    WithoutMemory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRequest {
    /// Serialized graph document.
    pub graph_snapshot: String,
    pub cluster: ErrorCluster,
    pub exemplars: ExemplarBlock,
    pub mode: MemoryMode,
    pub scope: EditScope,
}

impl ProposalRequest {
    /// `WithoutMemory` discards `exemplars`.
    pub fn new(
        graph: &TextualParameterGraph,
        cluster: ErrorCluster,
        exemplars: ExemplarBlock,
        mode: MemoryMode,
        scope: EditScope,
    ) -> Self {
        let exemplars = match mode {
            MemoryMode::WithMemory => exemplars,
            MemoryMode::WithoutMemory => ExemplarBlock::default(),
        };
        Self {
            graph_snapshot: crate::graph::serialize(graph),
            cluster,
            exemplars,
            mode,
            scope,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProposeError {
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("graph snapshot does not load: {0}")]
    Snapshot(#[source] GraphError),
    #[error("optimizer transport: {0}")]
    Transport(#[from] GatewayError),
    #[error("optimizer output violates the proposal schema: {0}")]
    Schema(String),
    #[error("modification {index} references missing node `{node}`")]
    DanglingTarget { index: usize, node: String },
    #[error("modification {index} is invalid: {reason}")]
    Invalid { index: usize, reason: String },
}

/// Numbered member list handed to the optimizer; `addresses_errors` refers
/// to these indices.
pub fn render_cluster(cluster: &ErrorCluster) -> String {
    let mut out = format!("Representative: {}\nErrors:\n", cluster.representative);
    for (i, m) in cluster.members.iter().enumerate() {
        let tasks: Vec<&str> = m.sources.iter().map(String::as_str).collect();
        out.push_str(&format!("[{i}] {} (tasks: {})\n", m.text, tasks.join(", ")));
    }
    out.trim_end().to_string()
}

/// Checks a parsed proposal against the snapshot without touching it.
pub fn validate_proposal(
    proposal: &OptimizationProposal,
    snapshot: &TextualParameterGraph,
    cluster_len: usize,
    scope: EditScope,
) -> Result<Vec<GraphEdit>, ProposeError> {
    for (index, m) in proposal.modifications.iter().enumerate() {
        if let Some(&bad) = m.addresses_errors.iter().find(|&&e| e >= cluster_len) {
            return Err(ProposeError::Invalid {
                index,
                reason: format!(
                    "addresses_errors index {bad} is out of range for {cluster_len} error(s)"
                ),
            });
        }
    }
    let edits = proposal.lower(scope).map_err(|e| match e {
        LowerError::Empty => ProposeError::Schema(e.to_string()),
        other => ProposeError::Invalid {
            index: other.index().unwrap_or(0),
            reason: other.to_string(),
        },
    })?;
    snapshot.apply_edits(&edits).map_err(|e| match e.source {
        GraphError::NotFound(node) | GraphError::EdgeEndpointMissing(node) => {
            ProposeError::DanglingTarget {
                index: e.index,
                node: node.to_string(),
            }
        }
        other => ProposeError::Invalid {
            index: e.index,
            reason: other.to_string(),
        },
    })?;
    Ok(edits)
}

fn decode(
    reply: &str,
    snapshot: &TextualParameterGraph,
    cluster_len: usize,
    scope: EditScope,
) -> Result<OptimizationProposal, ProposeError> {
    let json = extract_json_object(reply)
        .ok_or_else(|| ProposeError::Schema("no JSON object found".into()))?;
    let proposal: OptimizationProposal =
        serde_json::from_str(json).map_err(|e| ProposeError::Schema(e.to_string()))?;
    validate_proposal(&proposal, snapshot, cluster_len, scope)?;
    Ok(proposal)
}

pub fn propose(
    request: &ProposalRequest,
    optimizer: &ChatGateway,
) -> Result<OptimizationProposal, ProposeError> {
    propose_with(request, optimizer, &PromptTemplate::optimizer())
}

/// Asks for a proposal, validates it against the snapshot, and retries
/// once with a repair message if it is unusable.
pub fn propose_with(
    request: &ProposalRequest,
    optimizer: &ChatGateway,
    template: &PromptTemplate,
) -> Result<OptimizationProposal, ProposeError> {
    if request.cluster.is_empty() {
        return Err(ProposeError::EmptyCluster);
    }
    let snapshot = deserialize(&request.graph_snapshot).map_err(ProposeError::Snapshot)?;
    let experiences = match request.mode {
        MemoryMode::WithMemory => Some(request.exemplars.rendered.as_str()),
        MemoryMode::WithoutMemory => None,
    };
    let cluster_text = render_cluster(&request.cluster);
    let user = template
        .render_user(&[
            ("experiences", experiences),
            ("graph", Some(request.graph_snapshot.trim_end())),
            ("error_cluster", Some(&cluster_text)),
        ])
        .expect("optimizer template placeholders are supplied");
    let mut messages = vec![
        ChatMessage::system(&template.system),
        ChatMessage::user(user),
    ];
    let mut attempt = 0;
    loop {
        attempt += 1;
        let reply = optimizer.chat(&messages)?.response;
        match decode(&reply, &snapshot, request.cluster.len(), request.scope) {
            Ok(p) => return Ok(p),
            Err(e) if attempt >= 2 => return Err(e),
            Err(e) => {
                tracing::warn!(error = %e, "optimizer proposal rejected, asking for a repair");
                let mut repair = format!("The proposal cannot be used: {e}.");
                if request.scope == EditScope::RewriteOnly {
                    repair.push_str(" Only REWRITE_NODE is allowed.");
                }
                repair.push_str(" Reply with a corrected JSON object only.");
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(repair));
            }
        }
    }
}

/// Structural lowering of a proposal into graph edits.
pub fn lower(proposal: &OptimizationProposal) -> Result<Vec<GraphEdit>, LowerError> {
    proposal.lower(EditScope::Structural)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::cluster::EmbeddedGradient;
    use crate::gateway::{CallRole, EmbeddingVector, GatewayEnv, ModelConfig};
    use crate::graph::{NodeKind, NodeTree};
    use crate::memory::Exemplar;
    use crate::sim::{ScriptRule, ScriptedChat, ScriptedResponse};

    fn graph() -> TextualParameterGraph {
        TextualParameterGraph::from_trees(
            vec![NodeTree::internal(
                "Main Agent",
                NodeKind::Role,
                vec![NodeTree::leaf(
                    "persona",
                    NodeKind::Role,
                    "You are a research agent.",
                )],
            )
            .with_id("main")],
            vec![],
        )
        .unwrap()
    }

    fn cluster(n: usize) -> ErrorCluster {
        ErrorCluster::from_members(
            (0..n)
                .map(|i| {
                    EmbeddedGradient::new(
                        format!("skipped verification {i}"),
                        EmbeddingVector::normalized(vec![1.0, i as f64 * 0.1]).unwrap(),
                        format!("t{i}"),
                    )
                })
                .collect(),
        )
    }

    fn gateway(responses: Vec<ScriptedResponse>) -> (ChatGateway, Arc<ScriptedChat>) {
        let chat = Arc::new(ScriptedChat::new(
            "optimizer",
            vec![ScriptRule::any(responses)],
            true,
        ));
        let gw = ChatGateway::new(
            chat.clone(),
            ModelConfig::default(),
            CallRole::Optimizer,
            GatewayEnv::deterministic(),
        );
        (gw, chat)
    }

    const ADD: &str = r#"{"problem_context": "p", "modifications": [{"operation": "ADD_NODE",
        "target": {"parent": "main"}, "new_node": {"title": "Check", "type": "logic", "content": "Verify."},
        "addresses_errors": [0, 1], "rationale": "r"}]}"#;

    #[test]
    fn valid_proposal_is_returned() {
        let (gw, chat) = gateway(vec![ScriptedResponse::reply(ADD)]);
        let g = graph();
        let req = ProposalRequest::new(
            &g,
            cluster(2),
            ExemplarBlock::default(),
            MemoryMode::WithMemory,
            EditScope::Structural,
        );
        let p = propose(&req, &gw).unwrap();
        assert_eq!(p.modifications.len(), 1);
        assert_eq!(chat.requests().len(), 1);
        assert_eq!(lower(&p).unwrap().len(), 1);
    }

    #[test]
    fn dangling_target_after_repair_is_an_error() {
        let bad = ADD.replace("\"parent\": \"main\"", "\"parent\": \"ghost\"");
        let (gw, chat) = gateway(vec![ScriptedResponse::reply(bad)]);
        let g = graph();
        let before = crate::graph::serialize(&g);
        let req = ProposalRequest::new(
            &g,
            cluster(2),
            ExemplarBlock::default(),
            MemoryMode::WithMemory,
            EditScope::Structural,
        );
        let err = propose(&req, &gw).unwrap_err();
        assert!(
            matches!(err, ProposeError::DanglingTarget { index: 0, ref node } if node == "ghost"),
            "{err}"
        );
        assert_eq!(chat.requests().len(), 2);
        assert_eq!(crate::graph::serialize(&g), before);
    }

    #[test]
    fn repair_recovers_from_one_bad_reply() {
        let (gw, chat) = gateway(vec![
            ScriptedResponse::reply("no idea"),
            ScriptedResponse::reply(ADD),
        ]);
        let g = graph();
        let req = ProposalRequest::new(
            &g,
            cluster(2),
            ExemplarBlock::default(),
            MemoryMode::WithMemory,
            EditScope::Structural,
        );
        assert!(propose(&req, &gw).is_ok());
        let second = &chat.requests()[1];
        assert_eq!(second.len(), 4);
        assert!(second[3].content.contains("cannot be used"));
    }

    #[test]
    fn addresses_errors_out_of_range() {
        let (gw, _) = gateway(vec![ScriptedResponse::reply(ADD)]);
        let g = graph();
        let req = ProposalRequest::new(
            &g,
            cluster(1),
            ExemplarBlock::default(),
            MemoryMode::WithMemory,
            EditScope::Structural,
        );
        assert!(matches!(
            propose(&req, &gw),
            Err(ProposeError::Invalid { index: 0, .. })
        ));
    }

    #[test]
    fn rewrite_only_scope_rejects_add_node() {
        let (gw, _) = gateway(vec![ScriptedResponse::reply(ADD)]);
        let g = graph();
        let req = ProposalRequest::new(
            &g,
            cluster(2),
            ExemplarBlock::default(),
            MemoryMode::WithMemory,
            EditScope::RewriteOnly,
        );
        assert!(matches!(
            propose(&req, &gw),
            Err(ProposeError::Invalid { .. })
        ));
    }

    #[test]
    fn exemplars_only_reach_the_provider_with_memory() {
        let exemplar = Exemplar {
            entry_id: "exp-1".into(),
            problem_context: "EARLIER-PROBLEM".into(),
            proposal: serde_json::from_str(ADD).unwrap(),
            effectiveness: 1.0,
        };
        let block = ExemplarBlock {
            positives: vec![exemplar],
            negatives: vec![],
            rendered: "EXEMPLAR-TEXT".into(),
        };
        let g = graph();
        let (gw, chat) = gateway(vec![ScriptedResponse::reply(ADD)]);
        let with = ProposalRequest::new(
            &g,
            cluster(2),
            block.clone(),
            MemoryMode::WithMemory,
            EditScope::Structural,
        );
        let without = ProposalRequest::new(
            &g,
            cluster(2),
            block,
            MemoryMode::WithoutMemory,
            EditScope::Structural,
        );
        assert!(without.exemplars.is_empty());
        propose(&with, &gw).unwrap();
        propose(&without, &gw).unwrap();
        let requests = chat.requests();
        assert!(requests[0][1].content.contains("EXEMPLAR-TEXT"));
        assert!(!requests[1][1].content.contains("EXEMPLAR-TEXT"));
        assert!(requests[1][1].content.contains("skipped verification 1"));
    }

    #[test]
    fn empty_cluster_is_refused() {
        let (gw, _) = gateway(vec![]);
        let empty = ErrorCluster {
            members: vec![],
            representative: String::new(),
            member_tasks: Default::default(),
        };
        let req = ProposalRequest::new(
            &graph(),
            empty,
            ExemplarBlock::default(),
            MemoryMode::WithMemory,
            EditScope::Structural,
        );
        assert!(matches!(
            propose(&req, &gw),
            Err(ProposeError::EmptyCluster)
        ));
    }
}
