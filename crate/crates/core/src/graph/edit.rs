use serde::{Deserialize, Serialize};

use super::{validate_graph, OneHot, SceneEdge, SceneGraph, SceneNode, Schema};
use crate::error::EditError;

/// A single manipulation of a scene graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphEdit {
    AddNode { class: usize, cell: usize, z: usize },
    RemoveNode { node: usize },
    SetClass { node: usize, class: usize },
    SetDepthBin { node: usize, z: usize },
    SetLocation { node: usize, cell: usize },
    AddEdge { s: usize, r: usize, o: usize },
    RemoveEdge { edge: usize },
    SetRelation { edge: usize, r: usize },
}

/// Applies `edit`, returning a new graph. The input is left untouched and
/// the result is guaranteed to validate.
pub fn apply_edit(g: &SceneGraph, edit: &GraphEdit, schema: &Schema) -> Result<SceneGraph, EditError> {
    let mut out = g.clone();
    let node_exists = |i: usize| {
        if i < g.nodes.len() {
            Ok(())
        } else {
            Err(EditError::MissingNode(i))
        }
    };
    let edge_exists = |i: usize| {
        if i < g.edges.len() {
            Ok(())
        } else {
            Err(EditError::MissingEdge(i))
        }
    };
    match *edit {
        GraphEdit::AddNode { class, cell, z } => {
            out.nodes.push(SceneNode::new(class, cell, z, schema));
        }
        GraphEdit::RemoveNode { node } => {
            node_exists(node)?;
            out.nodes.remove(node);
            out.edges = g
                .edges
                .iter()
                .filter(|e| e.subject != node && e.object != node)
                .map(|e| {
                    let shift = |i: usize| if i > node { i - 1 } else { i };
                    SceneEdge::new(shift(e.subject), e.relation, shift(e.object))
                })
                .collect();
        }
        GraphEdit::SetClass { node, class } => {
            node_exists(node)?;
            out.nodes[node].class = class;
        }
        GraphEdit::SetDepthBin { node, z } => {
            node_exists(node)?;
            out.nodes[node].depth = OneHot::new(z, schema.depth_bins);
        }
        GraphEdit::SetLocation { node, cell } => {
            node_exists(node)?;
            out.nodes[node].location = OneHot::new(cell, schema.cells());
        }
        GraphEdit::AddEdge { s, r, o } => {
            node_exists(s)?;
            node_exists(o)?;
            let e = SceneEdge::new(s, r, o);
            if g.edges.contains(&e) {
                return Err(EditError::DuplicateEdge(s, r, o));
            }
            out.edges.push(e);
        }
        GraphEdit::RemoveEdge { edge } => {
            edge_exists(edge)?;
            out.edges.remove(edge);
        }
        GraphEdit::SetRelation { edge, r } => {
            edge_exists(edge)?;
            let old = g.edges[edge];
            let e = SceneEdge::new(old.subject, r, old.object);
            if g.edges.iter().enumerate().any(|(k, x)| k != edge && *x == e) {
                return Err(EditError::DuplicateEdge(e.subject, r, e.object));
            }
            out.edges[edge] = e;
        }
    }
    if let Some(v) = validate_graph(&out, schema).into_iter().next() {
        return Err(EditError::Invalid(v.to_string()));
    }
    Ok(out)
}

/// Reorders nodes: old node `i` moves to position `perm[i]`, and every edge
/// endpoint is remapped accordingly. Edge order is preserved.
pub fn permute_nodes(g: &SceneGraph, perm: &[usize]) -> Result<SceneGraph, EditError> {
    let n = g.nodes.len();
    if perm.len() != n {
        return Err(EditError::NotAPermutation(n));
    }
    let mut slots: Vec<Option<SceneNode>> = vec![None; n];
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || slots[p].is_some() {
            return Err(EditError::NotAPermutation(n));
        }
        slots[p] = Some(g.nodes[i].clone());
    }
    Ok(SceneGraph {
        nodes: slots.into_iter().map(|s| s.expect("bijection")).collect(),
        edges: g
            .edges
            .iter()
            .map(|e| SceneEdge::new(perm[e.subject], e.relation, perm[e.object]))
            .collect(),
        meta: g.meta.clone(),
    })
}
