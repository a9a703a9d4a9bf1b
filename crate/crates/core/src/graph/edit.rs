use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Edge, GraphError, NodeId, NodeTree, TextualParameterGraph};

/// One atomic change to a graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GraphEdit {
    RewriteNode {
        target: NodeId,
        new_content: String,
    },
    /// Inserts `node` (with its subtree) under `parent`; `position` of
    /// `None` appends.
    AddNode {
        parent: NodeId,
        position: Option<usize>,
        node: NodeTree,
    },
    /// Removes the node, its containment subtree and all incident edges.
    DeleteNode {
        target: NodeId,
    },
    AddEdge {
        from: NodeId,
        to: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    PruneEdge {
        from: NodeId,
        to: NodeId,
    },
}

/// An edit sequence failed; `index` is the offending edit's position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("modification {index}: {source}")]
pub struct ApplyError {
    pub index: usize,
    pub source: GraphError,
}

impl TextualParameterGraph {
    /// Applies all edits in order, or none of them. On success the version
    /// is incremented once and the result re-validated.
    pub fn apply_edits(&self, edits: &[GraphEdit]) -> Result<Self, ApplyError> {
        let mut next = self.clone();
        for (index, edit) in edits.iter().enumerate() {
            next.apply_one(edit)
                .map_err(|source| ApplyError { index, source })?;
        }
        next.validate().map_err(|source| ApplyError {
            index: edits.len().saturating_sub(1),
            source,
        })?;
        next.set_version(self.version() + 1);
        Ok(next)
    }

    fn apply_one(&mut self, edit: &GraphEdit) -> Result<(), GraphError> {
        match edit {
            GraphEdit::RewriteNode {
                target,
                new_content,
            } => {
                let node = self
                    .nodes
                    .get_mut(target)
                    .ok_or_else(|| GraphError::NotFound(target.clone()))?;
                if !node.is_leaf() {
                    return Err(GraphError::RewriteInternal(target.clone()));
                }
                if new_content.is_empty() {
                    return Err(GraphError::EmptyNode(target.clone()));
                }
                node.content = Some(new_content.clone());
                Ok(())
            }
            GraphEdit::AddNode {
                parent,
                position,
                node,
            } => {
                let parent_node = self
                    .nodes
                    .get(parent)
                    .ok_or_else(|| GraphError::NotFound(parent.clone()))?;
                // A node emptied earlier in the same sequence can take children again.
                if parent_node.content.is_some() {
                    return Err(GraphError::AddUnderLeaf(parent.clone()));
                }
                let len = parent_node.children.len();
                let position = position.unwrap_or(len);
                if position > len {
                    return Err(GraphError::PositionOutOfRange {
                        parent: parent.clone(),
                        position,
                        len,
                    });
                }
                let id = match &node.id {
                    Some(id) => id.clone(),
                    None => self.fresh_child_id(parent, len),
                };
                let id = self.insert_tree(node.clone(), id)?;
                self.nodes
                    .get_mut(parent)
                    .expect("parent checked above")
                    .children
                    .insert(position, id);
                Ok(())
            }
            GraphEdit::DeleteNode { target } => {
                if !self.nodes.contains_key(target) {
                    return Err(GraphError::NotFound(target.clone()));
                }
                if self.roots.contains(target) {
                    return Err(GraphError::DeleteRoot(target.clone()));
                }
                let mut doomed = Vec::new();
                let mut stack = vec![target.clone()];
                while let Some(id) = stack.pop() {
                    if let Some(node) = self.nodes.remove(&id) {
                        stack.extend(node.children);
                    }
                    doomed.push(id);
                }
                for node in self.nodes.values_mut() {
                    node.children.retain(|c| c != target);
                }
                self.edges
                    .retain(|(from, to), _| !doomed.contains(from) && !doomed.contains(to));
                Ok(())
            }
            GraphEdit::AddEdge { from, to, label } => self.insert_edge(Edge {
                from: from.clone(),
                to: to.clone(),
                label: label.clone(),
            }),
            GraphEdit::PruneEdge { from, to } => self
                .edges
                .remove(&(from.clone(), to.clone()))
                .map(|_| ())
                .ok_or_else(|| GraphError::EdgeNotFound(from.clone(), to.clone())),
        }
    }
}
