//! Textual parameter graph: typed prompt nodes arranged as a containment
//! forest, plus a separate set of directed dependency edges.
//!
//! Containment drives materialization (the text an agent actually sees).
//! Dependency edges never change materialized text; they are exposed to the
//! optimizer as structural context only.

mod diff;
mod document;
mod edit;
pub mod parse;
pub mod proposal;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use diff::diff;
pub use document::{deserialize, serialize, SCHEMA_TAG};
pub use edit::{ApplyError, GraphEdit};

/// Opaque node identifier, unique within one graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(value: &str) -> Self {
        Self(value.to_string())
    }
}

impl From<String> for NodeId {
    fn from(value: String) -> Self {
        Self(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Role,
    Logic,
    Tool,
    Generic,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [
        NodeKind::Role,
        NodeKind::Logic,
        NodeKind::Tool,
        NodeKind::Generic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Role => "role",
            NodeKind::Logic => "logic",
            NodeKind::Tool => "tool",
            NodeKind::Generic => "generic",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A node as stored in the graph's node table. Children are referenced by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptNode {
    pub id: NodeId,
    pub title: String,
    pub kind: NodeKind,
    pub content: Option<String>,
    pub children: Vec<NodeId>,
}

impl PromptNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Directed dependency edge (`from` informs or constrains `to`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Nested node representation, the shape used by graph documents, parser
/// output and `new_node` payloads. `id` may be absent on input; ids are then
/// allocated from the parent's id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTree {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<NodeId>,
    pub title: String,
    #[serde(rename = "type")]
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeTree>,
}

impl NodeTree {
    pub fn leaf(title: impl Into<String>, kind: NodeKind, content: impl Into<String>) -> Self {
        Self {
            id: None,
            title: title.into(),
            kind,
            content: Some(content.into()),
            children: Vec::new(),
        }
    }

    pub fn internal(title: impl Into<String>, kind: NodeKind, children: Vec<NodeTree>) -> Self {
        Self {
            id: None,
            title: title.into(),
            kind,
            content: None,
            children,
        }
    }

    pub fn with_id(mut self, id: impl Into<NodeId>) -> Self {
        self.id = Some(id.into());
        self
    }

    /// Number of nodes in this subtree.
    pub fn len(&self) -> usize {
        1 + self.children.iter().map(NodeTree::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("unsupported schema tag `{0}`")]
    UnsupportedSchema(String),
    #[error("graph has no roots")]
    NoRoots,
    #[error("node ids must be non-empty")]
    EmptyId,
    #[error("node titled `{0}` has no id")]
    MissingId(String),
    #[error("duplicate node id `{0}`")]
    DuplicateId(NodeId),
    #[error("node `{0}` has both content and children")]
    ContentAndChildren(NodeId),
    #[error("node `{0}` has neither content nor children")]
    EmptyNode(NodeId),
    #[error("node `{0}` not found")]
    NotFound(NodeId),
    #[error("`{0}` is not a root")]
    NotARoot(NodeId),
    #[error("node `{0}` has more than one parent")]
    MultipleParents(NodeId),
    #[error("containment cycle through `{0}`")]
    Cycle(NodeId),
    #[error("node `{0}` is not reachable from any root")]
    Unreachable(NodeId),
    #[error("edge endpoint `{0}` does not exist")]
    EdgeEndpointMissing(NodeId),
    #[error("self-loop edge on `{0}`")]
    SelfLoop(NodeId),
    #[error("duplicate edge `{0}` -> `{1}`")]
    DuplicateEdge(NodeId, NodeId),
    #[error("edge `{0}` -> `{1}` does not exist")]
    EdgeNotFound(NodeId, NodeId),
    #[error("node `{0}` is internal; only leaves can be rewritten")]
    RewriteInternal(NodeId),
    #[error("node `{0}` is a leaf and cannot take children")]
    AddUnderLeaf(NodeId),
    #[error("position {position} out of range under `{parent}` ({len} children)")]
    PositionOutOfRange {
        parent: NodeId,
        position: usize,
        len: usize,
    },
    #[error("root `{0}` cannot be deleted")]
    DeleteRoot(NodeId),
}

/// The optimizable configuration of an agent system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextualParameterGraph {
    roots: Vec<NodeId>,
    nodes: BTreeMap<NodeId, PromptNode>,
    edges: BTreeMap<(NodeId, NodeId), Option<String>>,
    version: u64,
}

/// Materialized text per root, in root order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaterializedConfig {
    pub prompts: Vec<(NodeId, String)>,
}

impl MaterializedConfig {
    pub fn get(&self, root: &NodeId) -> Option<&str> {
        self.prompts
            .iter()
            .find(|(id, _)| id == root)
            .map(|(_, text)| text.as_str())
    }

    /// All root prompts joined by blank lines.
    pub fn concatenated(&self) -> String {
        self.prompts
            .iter()
            .map(|(_, text)| text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

impl TextualParameterGraph {
    /// Builds a graph from nested trees (one per root) and dependency edges.
    /// Missing ids are allocated from the parent's id.
    pub fn from_trees(roots: Vec<NodeTree>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let mut graph = Self {
            roots: Vec::new(),
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            version: 0,
        };
        if roots.is_empty() {
            return Err(GraphError::NoRoots);
        }
        for (i, tree) in roots.into_iter().enumerate() {
            let id = match &tree.id {
                Some(id) => id.clone(),
                None => graph.fresh_id(&format!("root{i}")),
            };
            graph.insert_tree(tree, id.clone())?;
            graph.roots.push(id);
        }
        for edge in edges {
            graph.insert_edge(edge)?;
        }
        graph.validate()?;
        Ok(graph)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn node(&self, id: &NodeId) -> Option<&PromptNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PromptNode> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|((from, to), label)| Edge {
            from: from.clone(),
            to: to.clone(),
            label: label.clone(),
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: &NodeId, to: &NodeId) -> bool {
        self.edges.contains_key(&(from.clone(), to.clone()))
    }

    pub fn parent_of(&self, id: &NodeId) -> Option<&NodeId> {
        self.nodes
            .values()
            .find(|n| n.children.contains(id))
            .map(|n| &n.id)
    }

    pub fn leaves(&self) -> Vec<&PromptNode> {
        let mut out = Vec::new();
        for root in &self.roots {
            self.collect_leaves(root, &mut out);
        }
        out
    }

    fn collect_leaves<'a>(&'a self, id: &NodeId, out: &mut Vec<&'a PromptNode>) {
        if let Some(node) = self.nodes.get(id) {
            if node.is_leaf() {
                out.push(node);
            } else {
                for child in &node.children {
                    self.collect_leaves(child, out);
                }
            }
        }
    }

    /// Rebuilds the nested tree for `id`, ids included.
    pub fn subtree(&self, id: &NodeId) -> Option<NodeTree> {
        let node = self.nodes.get(id)?;
        Some(NodeTree {
            id: Some(node.id.clone()),
            title: node.title.clone(),
            kind: node.kind,
            content: node.content.clone(),
            children: node
                .children
                .iter()
                .filter_map(|child| self.subtree(child))
                .collect(),
        })
    }

    /// Renders one root prompt: depth-first in child order, each internal
    /// node as a heading of `depth` `#` markers, each leaf verbatim.
    pub fn materialize(&self, root: &NodeId) -> Result<String, GraphError> {
        if !self.nodes.contains_key(root) {
            return Err(GraphError::NotFound(root.clone()));
        }
        if !self.roots.contains(root) {
            return Err(GraphError::NotARoot(root.clone()));
        }
        let mut lines = Vec::new();
        self.render(root, 1, &mut lines);
        Ok(lines.join("\n"))
    }

    fn render(&self, id: &NodeId, depth: usize, lines: &mut Vec<String>) {
        let Some(node) = self.nodes.get(id) else {
            return;
        };
        if node.is_leaf() {
            lines.push(node.content.clone().unwrap_or_default());
        } else {
            lines.push(format!("{} {}", "#".repeat(depth), node.title));
            for child in &node.children {
                self.render(child, depth + 1, lines);
            }
        }
    }

    pub fn materialize_all(&self) -> MaterializedConfig {
        MaterializedConfig {
            prompts: self
                .roots
                .iter()
                .map(|root| {
                    let text = self.materialize(root).expect("roots are valid");
                    (root.clone(), text)
                })
                .collect(),
        }
    }

    /// Replaces every root by a single generic leaf holding its materialized
    /// prompt. Used for whole-prompt rewriting.
    pub fn flatten(&self) -> Self {
        let mut nodes = BTreeMap::new();
        for root in &self.roots {
            let node = &self.nodes[root];
            let content = self.materialize(root).expect("roots are valid");
            nodes.insert(
                root.clone(),
                PromptNode {
                    id: root.clone(),
                    title: node.title.clone(),
                    kind: NodeKind::Generic,
                    content: Some(content),
                    children: Vec::new(),
                },
            );
        }
        Self {
            roots: self.roots.clone(),
            nodes,
            edges: BTreeMap::new(),
            version: self.version,
        }
    }

    /// Hex SHA-256 of the serialized document.
    pub fn content_hash(&self) -> String {
        crate::util::sha256_hex(serialize(self).as_bytes())
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.roots.is_empty() {
            return Err(GraphError::NoRoots);
        }
        let mut parent: BTreeMap<&NodeId, &NodeId> = BTreeMap::new();
        for (id, node) in &self.nodes {
            if id.as_str().is_empty() {
                return Err(GraphError::EmptyId);
            }
            let has_content = node.content.as_deref().is_some_and(|c| !c.is_empty());
            let has_children = !node.children.is_empty();
            match (has_content, has_children) {
                (true, true) => return Err(GraphError::ContentAndChildren(id.clone())),
                (false, false) => return Err(GraphError::EmptyNode(id.clone())),
                _ => {}
            }
            for child in &node.children {
                if !self.nodes.contains_key(child) {
                    return Err(GraphError::NotFound(child.clone()));
                }
                if parent.insert(child, id).is_some() {
                    return Err(GraphError::MultipleParents(child.clone()));
                }
            }
        }
        let mut seen_roots = BTreeSet::new();
        for root in &self.roots {
            if !self.nodes.contains_key(root) {
                return Err(GraphError::NotFound(root.clone()));
            }
            if !seen_roots.insert(root) {
                return Err(GraphError::DuplicateId(root.clone()));
            }
            if parent.contains_key(root) {
                return Err(GraphError::Cycle(root.clone()));
            }
        }
        let mut reached = BTreeSet::new();
        let mut stack: Vec<&NodeId> = self.roots.iter().collect();
        while let Some(id) = stack.pop() {
            if !reached.insert(id) {
                return Err(GraphError::Cycle(id.clone()));
            }
            stack.extend(self.nodes[id].children.iter());
        }
        if let Some(id) = self.nodes.keys().find(|id| !reached.contains(id)) {
            return Err(GraphError::Unreachable(id.clone()));
        }
        for (from, to) in self.edges.keys() {
            for endpoint in [from, to] {
                if !self.nodes.contains_key(endpoint) {
                    return Err(GraphError::EdgeEndpointMissing(endpoint.clone()));
                }
            }
            if from == to {
                return Err(GraphError::SelfLoop(from.clone()));
            }
        }
        Ok(())
    }

    /// Smallest `<base>` or `<base>.<n>` not already in use.
    fn fresh_id(&self, base: &str) -> NodeId {
        let candidate = NodeId::new(base);
        if !self.nodes.contains_key(&candidate) {
            return candidate;
        }
        (0..)
            .map(|n| NodeId::new(format!("{base}.{n}")))
            .find(|id| !self.nodes.contains_key(id))
            .expect("unbounded id space")
    }

    fn fresh_child_id(&self, parent: &NodeId, index: usize) -> NodeId {
        (index..)
            .map(|n| NodeId::new(format!("{parent}.{n}")))
            .find(|id| !self.nodes.contains_key(id))
            .expect("unbounded id space")
    }

    /// Inserts a nested subtree under the given id; returns the id used.
    pub(crate) fn insert_tree(&mut self, tree: NodeTree, id: NodeId) -> Result<NodeId, GraphError> {
        if id.as_str().is_empty() {
            return Err(GraphError::EmptyId);
        }
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateId(id));
        }
        let has_content = tree.content.as_deref().is_some_and(|c| !c.is_empty());
        match (has_content, !tree.children.is_empty()) {
            (true, true) => return Err(GraphError::ContentAndChildren(id)),
            (false, false) => return Err(GraphError::EmptyNode(id)),
            _ => {}
        }
        self.nodes.insert(
            id.clone(),
            PromptNode {
                id: id.clone(),
                title: tree.title,
                kind: tree.kind,
                content: if has_content { tree.content } else { None },
                children: Vec::new(),
            },
        );
        let mut child_ids = Vec::with_capacity(tree.children.len());
        for (i, child) in tree.children.into_iter().enumerate() {
            let child_id = match &child.id {
                Some(cid) => cid.clone(),
                None => self.fresh_child_id(&id, i),
            };
            child_ids.push(self.insert_tree(child, child_id)?);
        }
        self.nodes.get_mut(&id).expect("just inserted").children = child_ids;
        Ok(id)
    }

    pub(crate) fn insert_edge(&mut self, edge: Edge) -> Result<(), GraphError> {
        for endpoint in [&edge.from, &edge.to] {
            if !self.nodes.contains_key(endpoint) {
                return Err(GraphError::EdgeEndpointMissing(endpoint.clone()));
            }
        }
        if edge.from == edge.to {
            return Err(GraphError::SelfLoop(edge.from));
        }
        let key = (edge.from, edge.to);
        if self.edges.contains_key(&key) {
            return Err(GraphError::DuplicateEdge(key.0, key.1));
        }
        self.edges.insert(key, edge.label);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> TextualParameterGraph {
        TextualParameterGraph::from_trees(
            vec![NodeTree::internal(
                "Main Agent",
                NodeKind::Generic,
                vec![
                    NodeTree::leaf("Persona", NodeKind::Role, "You are a research agent."),
                    NodeTree::internal(
                        "Workflow",
                        NodeKind::Logic,
                        vec![
                            NodeTree::leaf("Plan", NodeKind::Logic, "x"),
                            NodeTree::leaf("Answer", NodeKind::Logic, "y"),
                        ],
                    ),
                ],
            )
            .with_id("main")],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn ids_are_allocated_from_parent_paths() {
        let g = sample();
        let ids: Vec<_> = g.nodes().map(|n| n.id.as_str().to_string()).collect();
        assert_eq!(ids, ["main", "main.0", "main.1", "main.1.0", "main.1.1"]);
    }

    #[test]
    fn single_leaf_materializes_verbatim() {
        let g = TextualParameterGraph::from_trees(
            vec![NodeTree::leaf("system", NodeKind::Generic, "Verify constraints.").with_id("s")],
            vec![],
        )
        .unwrap();
        assert_eq!(g.materialize(&"s".into()).unwrap(), "Verify constraints.");
    }

    #[test]
    fn materialize_preserves_child_order_and_headings() {
        let g = sample();
        let text = g.materialize(&"main".into()).unwrap();
        assert_eq!(
            text,
            "# Main Agent\nYou are a research agent.\n## Workflow\nx\ny"
        );
        assert!(text.find('x').unwrap() < text.find('y').unwrap());
    }

    #[test]
    fn materialize_unknown_root() {
        let g = sample();
        assert_eq!(
            g.materialize(&"nope".into()),
            Err(GraphError::NotFound("nope".into()))
        );
        assert_eq!(
            g.materialize(&"main.0".into()),
            Err(GraphError::NotARoot("main.0".into()))
        );
    }

    #[test]
    fn node_with_content_and_children_is_rejected() {
        let mut tree = NodeTree::internal(
            "A",
            NodeKind::Logic,
            vec![NodeTree::leaf("B", NodeKind::Logic, "b")],
        );
        tree.content = Some("oops".into());
        assert_eq!(
            TextualParameterGraph::from_trees(vec![tree.with_id("a")], vec![]),
            Err(GraphError::ContentAndChildren("a".into()))
        );
    }

    #[test]
    fn edges_reject_self_loops_duplicates_and_dangling() {
        let trees = || sample().subtree(&"main".into()).unwrap();
        let e = |f: &str, t: &str| Edge {
            from: f.into(),
            to: t.into(),
            label: None,
        };
        assert_eq!(
            TextualParameterGraph::from_trees(vec![trees()], vec![e("main.0", "main.0")]),
            Err(GraphError::SelfLoop("main.0".into()))
        );
        assert_eq!(
            TextualParameterGraph::from_trees(
                vec![trees()],
                vec![e("main.0", "main.1"), e("main.0", "main.1")]
            ),
            Err(GraphError::DuplicateEdge("main.0".into(), "main.1".into()))
        );
        assert_eq!(
            TextualParameterGraph::from_trees(vec![trees()], vec![e("main.0", "ghost")]),
            Err(GraphError::EdgeEndpointMissing("ghost".into()))
        );
    }

    #[test]
    fn flatten_keeps_materialization() {
        let g = sample();
        let flat = g.flatten();
        assert_eq!(flat.node_count(), 1);
        assert_eq!(flat.materialize_all(), g.materialize_all());
        assert_eq!(flat.node(&"main".into()).unwrap().kind, NodeKind::Generic);
    }
}
