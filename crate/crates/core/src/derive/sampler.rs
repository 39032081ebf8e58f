use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DeriveError;
use crate::graph::{SceneEdge, SceneGraph, SceneNode, Schema};

/// Procedural scene-graph sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Inclusive range of the total node count (forced nodes included).
    pub node_count: (usize, usize),
    /// Relative weight of each class (by vocabulary name) for free slots.
    pub class_weights: Vec<(String, f64)>,
    /// Probability of adding one region of each optional background class,
    /// applied while the node count stays within range.
    pub background_inclusion: Vec<(String, f64)>,
    /// Probability of emitting each geometrically valid relation.
    pub relation_density: f64,
    /// Object depth bins deviate from their row prior by at most this much.
    pub depth_jitter: usize,
    pub max_edges_per_node: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            node_count: (4, 9),
            class_weights: vec![
                ("person".into(), 2.0),
                ("car".into(), 4.0),
                ("bus".into(), 0.5),
                ("truck".into(), 1.0),
            ],
            background_inclusion: vec![("tree".into(), 0.6), ("building".into(), 0.7)],
            relation_density: 0.5,
            depth_jitter: 1,
            max_edges_per_node: 4,
            seed: 0,
        }
    }
}

/// Rows of the location grid where each kind of node may be placed.
fn row_band(name: &str, grid: usize) -> (usize, usize) {
    let q = |num: usize, den: usize| (grid * num) / den;
    match name {
        "sky" => (0, q(1, 4).max(1)),
        "road" => (q(3, 4), grid),
        "sidewalk" => (q(5, 8), q(7, 8).max(q(5, 8) + 1)),
        "tree" | "building" | "vegetation" => (q(1, 4), q(1, 2).max(q(1, 4) + 1)),
        _ => (q(3, 8), q(7, 8).max(q(3, 8) + 1)),
    }
}

struct Resolved {
    weights: WeightedIndex<f64>,
    weighted_classes: Vec<usize>,
    inclusion: Vec<(usize, f64)>,
    road: usize,
    sky: usize,
}

fn resolve(cfg: &SamplerConfig, schema: &Schema) -> Result<Resolved, DeriveError> {
    let bad = |m: String| DeriveError::InvalidConfig(m);
    let class = |n: &str| {
        schema
            .classes
            .index_of(n)
            .ok_or_else(|| bad(format!("unknown class `{n}` in sampler config")))
    };
    let (lo, hi) = cfg.node_count;
    if lo < 2 || lo > hi {
        return Err(bad(format!("node_count range ({lo}, {hi}) must satisfy 2 <= min <= max")));
    }
    let mut weighted_classes = Vec::new();
    let mut w = Vec::new();
    for (n, v) in &cfg.class_weights {
        if !(v.is_finite() && *v >= 0.0) {
            return Err(bad(format!("weight for `{n}` must be non-negative")));
        }
        weighted_classes.push(class(n)?);
        w.push(*v);
    }
    let weights =
        WeightedIndex::new(&w).map_err(|_| bad("class weights must not all be zero".into()))?;
    let mut inclusion = Vec::new();
    for (n, p) in &cfg.background_inclusion {
        if !(0.0..=1.0).contains(p) {
            return Err(bad(format!("inclusion probability for `{n}` outside [0, 1]")));
        }
        inclusion.push((class(n)?, *p));
    }
    if !(0.0..=1.0).contains(&cfg.relation_density) {
        return Err(bad("relation_density outside [0, 1]".into()));
    }
    Ok(Resolved {
        weights,
        weighted_classes,
        inclusion,
        road: class("road")?,
        sky: class("sky")?,
    })
}

/// Samples one random scene graph.
///
/// Road and sky are always present. Free slots are filled by class weight,
/// then optional background regions are added while the node count stays
/// within range. Node cells follow per-class row priors and object depth
/// bins follow their image row (lower in the image is nearer). Relations are
/// emitted only where the sampled cells and depth bins support them.
pub fn sample_graph<R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    schema: &Schema,
    rng: &mut R,
) -> Result<SceneGraph, DeriveError> {
    let res = resolve(cfg, schema)?;
    let (lo, hi) = cfg.node_count;
    let target = rng.random_range(lo..=hi);
    let mut classes = vec![res.sky, res.road];
    while classes.len() < target {
        classes.push(res.weighted_classes[res.weights.sample(rng)]);
    }
    for &(c, p) in &res.inclusion {
        if classes.len() < hi && !classes.contains(&c) && rng.random_bool(p) {
            classes.push(c);
        }
    }

    let l = schema.grid;
    let z_last = schema.depth_bins - 1;
    let mut nodes = Vec::with_capacity(classes.len());
    for &c in &classes {
        let name = schema.classes.name_of(c).unwrap_or("");
        let (r0, r1) = row_band(name, l);
        let row = rng.random_range(r0..r1.min(l));
        let col = rng.random_range(0..l);
        // Sky and road are backdrops painted before everything else.
        let z = if name == "sky" || name == "road" {
            z_last
        } else if schema.classes.is_background(c) {
            rng.random_range(schema.depth_bins / 2..=z_last)
        } else {
            // Objects lower in the band sit nearer the camera.
            let frac = (r1 - 1 - row) as f64 / (r1 - r0).max(2).saturating_sub(1) as f64;
            let base = (frac * z_last as f64).round() as i64;
            let j = cfg.depth_jitter as i64;
            (base + rng.random_range(-j..=j)).clamp(0, z_last as i64) as usize
        };
        nodes.push(SceneNode::new(c, row * l + col, z, schema));
    }

    let edges = sample_edges(&nodes, cfg, schema, rng);
    Ok(SceneGraph {
        nodes,
        edges,
        meta: Default::default(),
    })
}

fn sample_edges<R: Rng + ?Sized>(
    nodes: &[SceneNode],
    cfg: &SamplerConfig,
    schema: &Schema,
    rng: &mut R,
) -> Vec<SceneEdge> {
    let rels = &schema.relations;
    let (left, above, front) = (
        rels.index_of("left_of"),
        rels.index_of("above"),
        rels.index_of("in_front_of"),
    );
    let objects: Vec<usize> = (0..nodes.len())
        .filter(|&i| schema.classes.is_object(nodes[i].class))
        .collect();
    let mut degree = vec![0usize; nodes.len()];
    let mut edges = Vec::new();
    for (a, &i) in objects.iter().enumerate() {
        for &j in &objects[a + 1..] {
            if degree[i] >= cfg.max_edges_per_node || degree[j] >= cfg.max_edges_per_node {
                continue;
            }
            let (ri, ci) = schema.cell_rc(nodes[i].cell());
            let (rj, cj) = schema.cell_rc(nodes[j].cell());
            let (zi, zj) = (nodes[i].depth_bin(), nodes[j].depth_bin());
            let mut facts = Vec::new();
            for (rel, first, second) in [(left, ci, cj), (above, ri, rj), (front, zi, zj)] {
                let Some(r) = rel else { continue };
                if first < second {
                    facts.push(rels.canonicalize(i, r, j));
                } else if second < first {
                    facts.push(rels.canonicalize(j, r, i));
                }
            }
            let before = edges.len();
            for (s, r, o) in facts {
                if rng.random_bool(cfg.relation_density) {
                    edges.push(SceneEdge::new(s, r, o));
                }
            }
            if edges.len() > before {
                degree[i] += 1;
                degree[j] += 1;
            }
        }
    }
    edges
}

/// `n` graphs from a single seeded stream; each graph's `meta` records the
/// seed and its index.
pub fn sample_corpus(
    cfg: &SamplerConfig,
    schema: &Schema,
    n: usize,
) -> Result<Vec<SceneGraph>, DeriveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..n)
        .map(|k| {
            let mut g = sample_graph(cfg, schema, &mut rng)?;
            g.meta.insert("sampler_seed".into(), cfg.seed.into());
            g.meta.insert("index".into(), k.into());
            Ok(g)
        })
        .collect()
}
