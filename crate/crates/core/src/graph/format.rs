//! Canonical scene-graph documents.
//!
//! ```text
//! {"classes":"default","edges":[{"o":1,"r":"left_of","s":0}],"meta":{},
//!  "nodes":[{"cell":36,"class":"car","z":3},...],"version":1}
//! ```
//!
//! Keys are sorted, arrays are in index order and integers are plain
//! decimals, so equal graphs always produce identical bytes.

use serde::{Deserialize, Serialize};

use super::{validate_graph, OneHot, SceneEdge, SceneGraph, SceneNode, Schema};
use crate::error::ParseError;

pub const FORMAT_VERSION: u32 = 1;

// Field order is the serialized key order: keep it alphabetical.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    classes: String,
    edges: Vec<EdgeDoc>,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
    nodes: Vec<NodeDoc>,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    cell: usize,
    class: String,
    z: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    o: usize,
    r: String,
    s: usize,
}

/// Serializes a valid graph to its canonical single-line document.
///
/// Panics if a node carries a malformed one-hot or an index outside the
/// schema; call [`validate_graph`] first for untrusted graphs.
pub fn serialize_graph(g: &SceneGraph, schema: &Schema) -> String {
    let doc = Document {
        classes: schema.classes.name().to_string(),
        edges: g
            .edges
            .iter()
            .map(|e| EdgeDoc {
                o: e.object,
                r: schema
                    .relations
                    .name_of(e.relation)
                    .expect("relation index out of range")
                    .to_string(),
                s: e.subject,
            })
            .collect(),
        meta: g.meta.clone(),
        nodes: g
            .nodes
            .iter()
            .map(|n| NodeDoc {
                cell: n.cell(),
                class: schema
                    .classes
                    .name_of(n.class)
                    .expect("class index out of range")
                    .to_string(),
                z: n.depth_bin(),
            })
            .collect(),
        version: FORMAT_VERSION,
    };
    serde_json::to_string(&doc).expect("document serialization cannot fail")
}

/// Parses and validates a document against `schema`.
pub fn parse_graph(doc: &str, schema: &Schema) -> Result<SceneGraph, ParseError> {
    let g = parse_graph_unchecked(doc, schema)?;
    if let Some(v) = validate_graph(&g, schema).into_iter().next() {
        return Err(ParseError::at(violation_path(&v), v.reason));
    }
    Ok(g)
}

/// Document path of a violation, e.g. `edges[2]`.
pub fn violation_path(v: &super::Violation) -> String {
    match v.at {
        super::Location::Node(i) => format!("nodes[{i}]"),
        super::Location::Edge(i) => format!("edges[{i}]"),
    }
}

/// Parses a document and resolves its names and indices without checking
/// graph invariants (self-relations, duplicates, contradictions); see
/// [`validate_graph`] for those.
pub fn parse_graph_unchecked(doc: &str, schema: &Schema) -> Result<SceneGraph, ParseError> {
    let d: Document = serde_json::from_str(doc).map_err(|e| ParseError::syntax(&e))?;
    if d.version != FORMAT_VERSION {
        return Err(ParseError::at(
            "version",
            format!("unsupported version {} (expected {FORMAT_VERSION})", d.version),
        ));
    }
    if d.classes != schema.classes.name() {
        return Err(ParseError::at(
            "classes",
            format!(
                "vocabulary `{}` does not match loaded vocabulary `{}`",
                d.classes,
                schema.classes.name()
            ),
        ));
    }
    let mut nodes = Vec::with_capacity(d.nodes.len());
    for (i, n) in d.nodes.iter().enumerate() {
        let class = schema.classes.index_of(&n.class).ok_or_else(|| {
            ParseError::at(format!("nodes[{i}].class"), format!("unknown class `{}`", n.class))
        })?;
        if n.cell >= schema.cells() {
            return Err(ParseError::at(
                format!("nodes[{i}].cell"),
                format!("cell {} out of range 0..{}", n.cell, schema.cells()),
            ));
        }
        if n.z >= schema.depth_bins {
            return Err(ParseError::at(
                format!("nodes[{i}].z"),
                format!("depth bin {} out of range 0..{}", n.z, schema.depth_bins),
            ));
        }
        nodes.push(SceneNode {
            class,
            location: OneHot::new(n.cell, schema.cells()),
            depth: OneHot::new(n.z, schema.depth_bins),
        });
    }
    let mut edges = Vec::with_capacity(d.edges.len());
    for (k, e) in d.edges.iter().enumerate() {
        let relation = schema.relations.index_of(&e.r).ok_or_else(|| {
            ParseError::at(format!("edges[{k}].r"), format!("unknown relation `{}`", e.r))
        })?;
        for (field, idx) in [("s", e.s), ("o", e.o)] {
            if idx >= nodes.len() {
                return Err(ParseError::at(
                    format!("edges[{k}].{field}"),
                    format!("node index {idx} out of range 0..{}", nodes.len()),
                ));
            }
        }
        edges.push(SceneEdge::new(e.s, relation, e.o));
    }
    Ok(SceneGraph {
        nodes,
        edges,
        meta: d.meta,
    })
}

/// A corpus file: one canonical document per line.
pub fn serialize_corpus(graphs: &[SceneGraph], schema: &Schema) -> String {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&serialize_graph(g, schema));
        out.push('\n');
    }
    out
}

/// Parses a corpus file; blank lines are skipped and errors carry the
/// 1-based line number of the offending document.
pub fn parse_corpus(text: &str, schema: &Schema) -> Result<Vec<SceneGraph>, ParseError> {
    let mut graphs = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g = parse_graph(line, schema).map_err(|mut e| {
            if e.line == 0 {
                e.path = format!("line {}: {}", k + 1, e.path);
            } else {
                e.line = k + 1;
            }
            e
        })?;
        graphs.push(g);
    }
    Ok(graphs)
}
