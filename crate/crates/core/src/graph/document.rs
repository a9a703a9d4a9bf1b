use serde::{Deserialize, Serialize};

use super::{Edge, GraphError, NodeTree, TextualParameterGraph};

/// Schema tag written into every graph document.
pub const SCHEMA_TAG: &str = "tpg/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDocument {
    schema: String,
    version: u64,
    roots: Vec<NodeTree>,
    #[serde(default)]
    edges: Vec<Edge>,
}

/// Pretty-printed JSON document with a trailing newline. Byte-stable for
/// equal graphs.
pub fn serialize(graph: &TextualParameterGraph) -> String {
    let doc = GraphDocument {
        schema: SCHEMA_TAG.to_string(),
        version: graph.version(),
        roots: graph
            .roots()
            .iter()
            .map(|root| graph.subtree(root).expect("roots are valid"))
            .collect(),
        edges: graph.edges().collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("graph documents always serialize");
    text.push('\n');
    text
}

pub fn deserialize(text: &str) -> Result<TextualParameterGraph, GraphError> {
    let doc: GraphDocument =
        serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
    if doc.schema != SCHEMA_TAG {
        return Err(GraphError::UnsupportedSchema(doc.schema));
    }
    for root in &doc.roots {
        require_ids(root)?;
    }
    let mut graph = TextualParameterGraph::from_trees(doc.roots, doc.edges)?;
    graph.set_version(doc.version);
    Ok(graph)
}

fn require_ids(tree: &NodeTree) -> Result<(), GraphError> {
    match &tree.id {
        None => Err(GraphError::MissingId(tree.title.clone())),
        Some(id) if id.as_str().is_empty() => Err(GraphError::EmptyId),
        Some(_) => tree.children.iter().try_for_each(require_ids),
    }
}
