use std::collections::{BTreeMap, BTreeSet};

use super::{GraphEdit, NodeId, PromptNode, TextualParameterGraph};

/// Computes an edit list that turns `before` into `after`.
///
/// Nodes are matched by id. A node is kept in place when it sits under the
/// same (kept) parent with the same title, kind and leaf/internal shape, and
/// its relative order among kept siblings is preserved (longest common
/// subsequence). Everything else is deleted and re-added from `after`, so
/// the result of applying the edits is structurally equal to `after` up to
/// the version counter. Roots are matched by id and are expected to agree on
/// title, kind and shape, which holds for any two graphs related by edits.
pub fn diff(before: &TextualParameterGraph, after: &TextualParameterGraph) -> Vec<GraphEdit> {
    let after_parent = parent_map(after);
    let mut kept: BTreeSet<NodeId> = BTreeSet::new();
    let mut deletes = Vec::new();
    let mut rewrites = Vec::new();
    let mut adds = Vec::new();

    let mut queue: Vec<NodeId> = before
        .roots()
        .iter()
        .filter(|r| after.roots().contains(r))
        .filter(|r| same_shape(before.node(r), after.node(r)))
        .cloned()
        .collect();
    kept.extend(queue.iter().cloned());

    while let Some(id) = queue.pop() {
        let old = before.node(&id).expect("kept ids exist in before");
        let new = after.node(&id).expect("kept ids exist in after");
        if old.is_leaf() {
            if old.content != new.content {
                rewrites.push(GraphEdit::RewriteNode {
                    target: id.clone(),
                    new_content: new.content.clone().unwrap_or_default(),
                });
            }
            continue;
        }
        let candidates: Vec<&NodeId> = old
            .children
            .iter()
            .filter(|c| after_parent.get(*c) == Some(&id))
            .filter(|c| same_shape(before.node(c), after.node(c)))
            .collect();
        let target_order: Vec<&NodeId> = new
            .children
            .iter()
            .filter(|c| candidates.contains(c))
            .collect();
        let stay: BTreeSet<&NodeId> = lcs(&candidates, &target_order).into_iter().collect();
        for child in &old.children {
            if stay.contains(child) {
                kept.insert(child.clone());
                queue.push(child.clone());
            } else {
                deletes.push(GraphEdit::DeleteNode {
                    target: child.clone(),
                });
            }
        }
        for (position, child) in new.children.iter().enumerate() {
            if !stay.contains(child) {
                adds.push((
                    id.clone(),
                    position,
                    after.subtree(child).expect("child exists in after"),
                ));
            }
        }
    }

    // Added subtrees hang off kept parents only, so they never nest.
    let adds = adds
        .into_iter()
        .map(|(parent, position, node)| GraphEdit::AddNode {
            parent,
            position: Some(position),
            node,
        });

    let before_edges: BTreeMap<_, _> = before.edges().map(|e| ((e.from, e.to), e.label)).collect();
    let after_edges: BTreeMap<_, _> = after.edges().map(|e| ((e.from, e.to), e.label)).collect();
    let survives = |id: &NodeId| kept.contains(id);

    let mut prunes = Vec::new();
    let mut current = BTreeMap::new();
    for (key, label) in &before_edges {
        if !(survives(&key.0) && survives(&key.1)) {
            continue;
        }
        if after_edges.get(key) == Some(label) {
            current.insert(key.clone(), label.clone());
        } else {
            prunes.push(GraphEdit::PruneEdge {
                from: key.0.clone(),
                to: key.1.clone(),
            });
        }
    }
    let edge_adds = after_edges
        .iter()
        .filter(|(key, _)| !current.contains_key(*key))
        .map(|((from, to), label)| GraphEdit::AddEdge {
            from: from.clone(),
            to: to.clone(),
            label: label.clone(),
        });

    prunes
        .into_iter()
        .chain(deletes)
        .chain(rewrites)
        .chain(adds)
        .chain(edge_adds)
        .collect()
}

fn same_shape(a: Option<&PromptNode>, b: Option<&PromptNode>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.title == b.title && a.kind == b.kind && a.is_leaf() == b.is_leaf(),
        _ => false,
    }
}

fn parent_map(graph: &TextualParameterGraph) -> BTreeMap<NodeId, NodeId> {
    graph
        .nodes()
        .flat_map(|n| n.children.iter().map(move |c| (c.clone(), n.id.clone())))
        .collect()
}

fn lcs<'a>(a: &[&'a NodeId], b: &[&'a NodeId]) -> Vec<&'a NodeId> {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i][j] = if a[i] == b[j] {
                table[i + 1][j + 1] + 1
            } else {
                table[i + 1][j].max(table[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < n && j < m {
        if a[i] == b[j] {
            out.push(a[i]);
            i += 1;
            j += 1;
        } else if table[i + 1][j] >= table[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}
