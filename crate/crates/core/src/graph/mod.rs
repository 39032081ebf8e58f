//! Scene graphs: nodes carrying (class, grid cell, depth bin) and typed
//! directed spatial relations between them.

mod edit;
mod format;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use edit::{apply_edit, permute_nodes, GraphEdit};
pub use format::{
    parse_corpus, parse_graph, parse_graph_unchecked, serialize_corpus, serialize_graph, violation_path,
    FORMAT_VERSION,
};
pub use vocab::{AxisId, ClassVocab, RelationVocab};

/// A categorical attribute stored as its set of active positions.
///
/// Well-formed values have exactly one active position; the type can hold
/// malformed encodings so that tensor-boundary data can be validated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OneHot {
    len: usize,
    active: Vec<usize>,
}

impl OneHot {
    pub fn new(index: usize, len: usize) -> Self {
        Self {
            len,
            active: vec![index],
        }
    }

    /// Builds from a dense 0/1 vector; any non-zero entry counts as active.
    pub fn from_dense(bits: &[f64]) -> Self {
        Self {
            len: bits.len(),
            active: bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b != 0.0)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// The active index when the encoding is well-formed.
    pub fn index(&self) -> Option<usize> {
        match self.active.as_slice() {
            [i] if *i < self.len => Some(*i),
            _ => None,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        for &i in &self.active {
            if i < self.len {
                v[i] = 1.0;
            }
        }
        v
    }
}

/// One object or background region.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SceneNode {
    pub class: usize,
    pub location: OneHot,
    pub depth: OneHot,
}

impl SceneNode {
    pub fn new(class: usize, cell: usize, depth_bin: usize, schema: &Schema) -> Self {
        Self {
            class,
            location: OneHot::new(cell, schema.grid * schema.grid),
            depth: OneHot::new(depth_bin, schema.depth_bins),
        }
    }

    /// Grid cell index; panics on a malformed encoding (validate first).
    pub fn cell(&self) -> usize {
        self.location.index().expect("malformed location one-hot")
    }

    /// Depth bin; panics on a malformed encoding (validate first).
    pub fn depth_bin(&self) -> usize {
        self.depth.index().expect("malformed depth one-hot")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneEdge {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

impl SceneEdge {
    pub fn new(subject: usize, relation: usize, object: usize) -> Self {
        Self {
            subject,
            relation,
            object,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGraph {
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<SceneEdge>,
    /// Free-form provenance (source record id, sampler seed, ...).
    pub meta: serde_json::Map<String, serde_json::Value>,
}

/// Everything needed to interpret a graph: vocabularies, grid size `L` and
/// number of depth bins `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub classes: ClassVocab,
    pub depth_bins: usize,
    pub grid: usize,
    pub relations: RelationVocab,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            classes: ClassVocab::default_traffic(),
            relations: RelationVocab::default_spatial(),
            grid: 8,
            depth_bins: 8,
        }
    }
}

impl Schema {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// (row, column) of a row-major cell index.
    pub fn cell_rc(&self, cell: usize) -> (usize, usize) {
        (cell / self.grid, cell % self.grid)
    }
}

/// Where a validation problem was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Location {
    Node(usize),
    Edge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub at: Location,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.at {
            Location::Node(i) => write!(f, "node {i}: {}", self.reason),
            Location::Edge(i) => write!(f, "edge {i}: {}", self.reason),
        }
    }
}

/// Every invariant violation in `g`; empty means valid.
pub fn validate_graph(g: &SceneGraph, schema: &Schema) -> Vec<Violation> {
    let mut out = Vec::new();
    let node_v = |i, reason: String| Violation {
        at: Location::Node(i),
        reason,
    };
    for (i, n) in g.nodes.iter().enumerate() {
        if n.class >= schema.classes.len() {
            out.push(node_v(i, format!("class index {} out of range", n.class)));
        }
        check_one_hot(&n.location, schema.cells(), "location", i, &mut out);
        check_one_hot(&n.depth, schema.depth_bins, "depth", i, &mut out);
    }

    let n = g.nodes.len();
    let mut seen = HashSet::new();
    let mut axis_pairs: HashMap<(usize, usize, usize), usize> = HashMap::new();
    for (k, e) in g.edges.iter().enumerate() {
        let mut reasons = Vec::new();
        if e.subject >= n {
            reasons.push(format!("subject {} out of range", e.subject));
        }
        if e.object >= n {
            reasons.push(format!("object {} out of range", e.object));
        }
        if e.subject == e.object {
            reasons.push(format!("self-relation on node {}", e.subject));
        }
        let rel_ok = e.relation < schema.relations.len();
        if !rel_ok {
            reasons.push(format!("relation index {} out of range", e.relation));
        }
        if reasons.is_empty() {
            if !seen.insert(*e) {
                reasons.push("duplicate edge".to_string());
            } else {
                let axis = schema.relations.axis(e.relation);
                let key = (e.subject.min(e.object), e.subject.max(e.object), axis);
                if let Some(prev) = axis_pairs.insert(key, k) {
                    reasons.push(format!(
                        "contradicts or repeats edge {prev} on the same axis for this node pair"
                    ));
                }
            }
        }
        out.extend(reasons.into_iter().map(|reason| Violation {
            at: Location::Edge(k),
            reason,
        }));
    }
    out
}

fn check_one_hot(h: &OneHot, expected: usize, what: &str, node: usize, out: &mut Vec<Violation>) {
    let reason = if h.len() != expected {
        Some(format!("{what} encoding has length {}, expected {expected}", h.len()))
    } else if h.active().len() != 1 {
        Some(format!(
            "{what} encoding has {} active entries, expected exactly one",
            h.active().len()
        ))
    } else if h.active()[0] >= expected {
        Some(format!("{what} index {} out of range", h.active()[0]))
    } else {
        None
    };
    if let Some(reason) = reason {
        out.push(Violation {
            at: Location::Node(node),
            reason,
        });
    }
}

/// Number of nodes per class index.
pub fn class_histogram(g: &SceneGraph, classes: &ClassVocab) -> Vec<usize> {
    let mut h = vec![0; classes.len()];
    for n in &g.nodes {
        if let Some(slot) = h.get_mut(n.class) {
            *slot += 1;
        }
    }
    h
}
