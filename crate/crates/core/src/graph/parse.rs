//! Prompt decomposition through the parser role.

use thiserror::Error;

use super::{GraphError, NodeKind, NodeTree, TextualParameterGraph};
use crate::gateway::{ChatGateway, ChatMessage, GatewayError};
use crate::template::PromptTemplate;
use crate::util::{extract_json_object, slug};

/// Parser replies tried before falling back to a single generic leaf.
pub const PARSE_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub graph: TextualParameterGraph,
    /// The parser never produced a usable decomposition; the graph is one
    /// generic leaf holding the whole prompt.
    pub unparsed: bool,
    /// Why each rejected reply was rejected.
    pub issues: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("prompt `{0}` is empty")]
    EmptyPrompt(String),
    #[error("parser transport: {0}")]
    Transport(#[from] GatewayError),
}

pub fn parse_prompt(
    prompt_text: &str,
    prompt_label: &str,
    parser: &ChatGateway,
) -> Result<ParseOutcome, ParseError> {
    parse_prompt_with(prompt_text, prompt_label, parser, &PromptTemplate::parser())
}

pub fn parse_prompt_with(
    prompt_text: &str,
    prompt_label: &str,
    parser: &ChatGateway,
    template: &PromptTemplate,
) -> Result<ParseOutcome, ParseError> {
    if prompt_text.trim().is_empty() {
        return Err(ParseError::EmptyPrompt(prompt_label.to_string()));
    }
    let root_id = slug(prompt_label);
    let user = template
        .render_user(&[
            ("prompt_type", Some(prompt_label)),
            ("prompt", Some(prompt_text)),
        ])
        .expect("parser template placeholders are supplied");
    let mut messages = vec![
        ChatMessage::system(&template.system),
        ChatMessage::user(user),
    ];
    let mut issues = Vec::new();
    for attempt in 1..=PARSE_ATTEMPTS {
        let reply = parser.chat(&messages)?.response;
        match decode(&reply, &root_id, prompt_text) {
            Ok(graph) => {
                return Ok(ParseOutcome {
                    graph,
                    unparsed: false,
                    issues,
                })
            }
            Err(issue) => {
                tracing::warn!(label = prompt_label, attempt, %issue, "parser reply rejected");
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "That reply is not usable: {issue}. Reply again with only the JSON object, \
                     copying the prompt text verbatim."
                )));
                issues.push(issue);
            }
        }
    }
    Ok(ParseOutcome {
        graph: fallback_graph(prompt_text, prompt_label),
        unparsed: true,
        issues,
    })
}

/// One generic leaf holding the whole prompt.
pub fn fallback_graph(prompt_text: &str, prompt_label: &str) -> TextualParameterGraph {
    TextualParameterGraph::from_trees(
        vec![NodeTree::leaf(prompt_label, NodeKind::Generic, prompt_text)
            .with_id(slug(prompt_label))],
        vec![],
    )
    .expect("single non-empty leaf is valid")
}

fn clear_ids(tree: &mut NodeTree) {
    tree.id = None;
    tree.children.iter_mut().for_each(clear_ids);
}

fn decode(reply: &str, root_id: &str, prompt_text: &str) -> Result<TextualParameterGraph, String> {
    let json = extract_json_object(reply).ok_or("no JSON object found")?;
    let mut tree: NodeTree =
        serde_json::from_str(json).map_err(|e| format!("schema violation: {e}"))?;
    clear_ids(&mut tree);
    let graph = TextualParameterGraph::from_trees(vec![tree.with_id(root_id)], vec![])
        .map_err(|e: GraphError| format!("invalid graph: {e}"))?;
    let rendered = graph.materialize(&root_id.into()).expect("root exists");
    if let Some(line) = missing_line(prompt_text, &rendered) {
        return Err(format!("prompt line not preserved: {line:?}"));
    }
    Ok(graph)
}

/// First non-blank prompt line (markdown heading markers stripped) that
/// does not occur in `rendered`.
pub fn missing_line<'a>(prompt_text: &'a str, rendered: &str) -> Option<&'a str> {
    prompt_text
        .lines()
        .map(|l| l.trim().trim_start_matches('#').trim())
        .filter(|l| !l.is_empty())
        .find(|l| !rendered.contains(l))
}

/// Combines single-root graphs into one multi-agent graph.
pub fn merge(graphs: Vec<TextualParameterGraph>) -> Result<TextualParameterGraph, GraphError> {
    let mut roots = Vec::new();
    let mut edges = Vec::new();
    for g in &graphs {
        roots.extend(g.roots().iter().filter_map(|r| g.subtree(r)));
        edges.extend(g.edges());
    }
    TextualParameterGraph::from_trees(roots, edges)
}
