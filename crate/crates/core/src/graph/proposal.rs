//! Optimization proposals: machine-readable edit plans produced by the
//! optimizer role, and their lowering into [`GraphEdit`]s.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ApplyError, GraphEdit, NodeId, NodeTree, TextualParameterGraph};

/// Where a modification applies. Accepts a bare node id string or one of
/// the object forms `{"node"}`, `{"parent", "position"?}`, `{"from", "to"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Edge {
        from: NodeId,
        to: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    Parent {
        parent: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        position: Option<usize>,
    },
    Node {
        node: NodeId,
    },
    Id(NodeId),
}

impl Target {
    fn node_id(&self) -> Option<&NodeId> {
        match self {
            Target::Node { node } | Target::Id(node) => Some(node),
            Target::Parent { parent, .. } => Some(parent),
            Target::Edge { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modification {
    pub operation: String,
    pub target: Target,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_node: Option<NodeTree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_content: Option<String>,
    #[serde(default)]
    pub addresses_errors: Vec<usize>,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizationProposal {
    pub problem_context: String,
    pub modifications: Vec<Modification>,
}

/// Which operations a lowering may produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditScope {
    #[default]
    Structural,
    /// Only `REWRITE_NODE`; structural operations are rejected.
    RewriteOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LowerError {
    #[error("proposal has no modifications")]
    Empty,
    #[error("modification {index}: unknown operation `{operation}`")]
    UnknownOperation { index: usize, operation: String },
    #[error("modification {index}: operation `{operation}` is disabled in rewrite-only mode")]
    OperationDisabled { index: usize, operation: String },
    #[error("modification {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

impl LowerError {
    pub fn index(&self) -> Option<usize> {
        match self {
            LowerError::Empty => None,
            LowerError::UnknownOperation { index, .. }
            | LowerError::OperationDisabled { index, .. }
            | LowerError::Invalid { index, .. } => Some(*index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProposalError {
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Apply(#[from] ApplyError),
}

impl ProposalError {
    /// Index of the offending modification, when there is one.
    pub fn index(&self) -> Option<usize> {
        match self {
            ProposalError::Lower(e) => e.index(),
            ProposalError::Apply(e) => Some(e.index),
        }
    }
}

impl Modification {
    fn lower(&self, index: usize, scope: EditScope) -> Result<GraphEdit, LowerError> {
        let invalid = |reason: &str| LowerError::Invalid {
            index,
            reason: reason.to_string(),
        };
        let op = self.operation.trim().to_ascii_uppercase();
        if self.new_node.is_some() && self.new_content.is_some() {
            return Err(invalid("both `new_node` and `new_content` are present"));
        }
        if scope == EditScope::RewriteOnly && op != "REWRITE_NODE" {
            return Err(LowerError::OperationDisabled {
                index,
                operation: self.operation.clone(),
            });
        }
        let edge = |what: &str| match &self.target {
            Target::Edge { from, to, label } => Ok((from.clone(), to.clone(), label.clone())),
            _ => Err(invalid(&format!("{what} requires a {{from, to}} target"))),
        };
        match op.as_str() {
            "REWRITE_NODE" => {
                let target = match &self.target {
                    Target::Node { node } | Target::Id(node) => node.clone(),
                    _ => return Err(invalid("REWRITE_NODE requires a node target")),
                };
                let new_content = self
                    .new_content
                    .clone()
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| invalid("REWRITE_NODE requires `new_content`"))?;
                Ok(GraphEdit::RewriteNode {
                    target,
                    new_content,
                })
            }
            "ADD_NODE" => {
                let (parent, position) = match &self.target {
                    Target::Parent { parent, position } => (parent.clone(), *position),
                    Target::Node { node } | Target::Id(node) => (node.clone(), None),
                    Target::Edge { .. } => {
                        return Err(invalid("ADD_NODE requires a parent target"))
                    }
                };
                let node = self
                    .new_node
                    .clone()
                    .ok_or_else(|| invalid("ADD_NODE requires `new_node`"))?;
                Ok(GraphEdit::AddNode {
                    parent,
                    position,
                    node,
                })
            }
            "DELETE_NODE" => {
                let target = match &self.target {
                    Target::Node { node } | Target::Id(node) => node.clone(),
                    _ => return Err(invalid("DELETE_NODE requires a node target")),
                };
                Ok(GraphEdit::DeleteNode { target })
            }
            "ADD_EDGE" => {
                let (from, to, label) = edge("ADD_EDGE")?;
                Ok(GraphEdit::AddEdge { from, to, label })
            }
            "PRUNE_EDGE" => {
                let (from, to, _) = edge("PRUNE_EDGE")?;
                Ok(GraphEdit::PruneEdge { from, to })
            }
            _ => Err(LowerError::UnknownOperation {
                index,
                operation: self.operation.clone(),
            }),
        }
    }
}

impl OptimizationProposal {
    /// One edit per modification, in order.
    pub fn lower(&self, scope: EditScope) -> Result<Vec<GraphEdit>, LowerError> {
        if self.modifications.is_empty() {
            return Err(LowerError::Empty);
        }
        self.modifications
            .iter()
            .enumerate()
            .map(|(i, m)| m.lower(i, scope))
            .collect()
    }

    /// Node ids referenced by targets, in modification order.
    pub fn referenced_nodes(&self) -> Vec<&NodeId> {
        self.modifications
            .iter()
            .flat_map(|m| match &m.target {
                Target::Edge { from, to, .. } => vec![from, to],
                other => other.node_id().into_iter().collect(),
            })
            .collect()
    }
}

/// Lowers and applies a proposal atomically: either every modification
/// lands and the version increments once, or the input is left untouched.
pub fn apply_proposal(
    graph: &TextualParameterGraph,
    proposal: &OptimizationProposal,
    scope: EditScope,
) -> Result<TextualParameterGraph, ProposalError> {
    let edits = proposal.lower(scope)?;
    Ok(graph.apply_edits(&edits)?)
}
