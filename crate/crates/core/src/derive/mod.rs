//! Scene graphs from simulation-style annotations, procedural graph
//! sampling, and class-balanced corpus subsampling.

mod annotation;
mod balance;
mod sampler;

use serde::{Deserialize, Serialize};

use crate::error::DeriveError;
use crate::graph::RelationVocab;

pub use annotation::{
    derive_graph, load_record, save_record, AnnotationRecord, BinaryMask, DerivedGraph,
    DirectorySource, NodeTarget, ObjectAnnotation, RecordSource,
};
pub use balance::{balanced_subsample, kl_divergence, mean_ratio, KL_EPSILON};
pub use sampler::{sample_corpus, sample_graph, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DerivationConfig {
    /// Location grid size `L` (cells per side).
    pub grid: usize,
    /// Number of depth bins `Z`.
    pub depth_bins: usize,
    /// Depth in meters mapped to the last bin and beyond.
    pub z_max: f64,
    /// Horizontal center gap (normalized) required for left_of/right_of.
    pub lateral_gap_min: f64,
    /// Vertical center gap (normalized) required for above/below.
    pub vertical_gap_min: f64,
    /// Depth gap in meters required for in_front_of/behind.
    pub depth_gap_min: f64,
    pub max_edges_per_node: usize,
    /// Minimum pixel share for a background class to become a node.
    pub background_min_area: f64,
    /// Side of the square training mask targets.
    pub mask_size: usize,
}

impl Default for DerivationConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            depth_bins: 8,
            z_max: 80.0,
            lateral_gap_min: 0.05,
            vertical_gap_min: 0.05,
            depth_gap_min: 2.0,
            max_edges_per_node: 4,
            background_min_area: 0.005,
            mask_size: 32,
        }
    }
}

impl DerivationConfig {
    pub fn validate(&self) -> Result<(), DeriveError> {
        let bad = |m: &str| Err(DeriveError::InvalidConfig(m.to_string()));
        if self.grid < 2 || self.depth_bins < 2 {
            return bad("grid and depth_bins must be at least 2");
        }
        if !(self.z_max > 0.0
            && self.lateral_gap_min > 0.0
            && self.vertical_gap_min > 0.0
            && self.depth_gap_min > 0.0)
        {
            return bad("thresholds must be positive");
        }
        if self.mask_size == 0 {
            return bad("mask_size must be positive");
        }
        Ok(())
    }
}

/// Depth bin of a camera-frame depth: `min(floor(z / (z_max/Z)), Z−1)`.
pub fn quantize_depth(z_meters: f64, cfg: &DerivationConfig) -> Result<usize, DeriveError> {
    if z_meters < 0.0 || z_meters.is_nan() {
        return Err(DeriveError::NegativeDepth(z_meters));
    }
    let width = cfg.z_max / cfg.depth_bins as f64;
    let bin = (z_meters / width).floor();
    Ok(if bin >= (cfg.depth_bins - 1) as f64 {
        cfg.depth_bins - 1
    } else {
        bin as usize
    })
}

/// Axis-aligned image box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2d {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Box2d {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn iou(&self, other: &Box2d) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Row-major cell of a normalized point, clamped into the grid.
pub fn grid_cell_of_point(x: f64, y: f64, grid: usize) -> usize {
    let clamp = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    clamp(y) * grid + clamp(x)
}

/// Cell of a box center.
pub fn grid_cell_of_box(b: &Box2d, grid: usize) -> usize {
    let (cx, cy) = b.center();
    grid_cell_of_point(cx, cy, grid)
}

/// Cell of a mask centroid (pixel centers, normalized).
pub fn grid_cell_of_mask(m: &BinaryMask, grid: usize) -> Result<usize, DeriveError> {
    let (cx, cy) = m.centroid().ok_or(DeriveError::EmptyMask)?;
    Ok(grid_cell_of_point(cx, cy, grid))
}

/// Geometry needed to relate two annotated objects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub box2d: Box2d,
    /// Camera-frame depth of the object center, meters.
    pub depth: f64,
}

/// A relation between an ordered pair `(a, b)`, already in canonical
/// orientation: when `a_is_subject` is false the stored edge is `(b, r, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrientedRelation {
    pub relation: usize,
    pub a_is_subject: bool,
}

/// Spatial predicates between `a` and `b`:
/// `left_of ⟺ a.cx + lateral_gap < b.cx`,
/// `above ⟺ a.cy + vertical_gap < b.cy`,
/// `in_front_of ⟺ b.z − a.z > depth_gap`, and their duals with the
/// arguments swapped. Results are canonicalized under `relations`.
pub fn pairwise_relation(
    a: &Placement,
    b: &Placement,
    cfg: &DerivationConfig,
    relations: &RelationVocab,
) -> Vec<OrientedRelation> {
    let (ax, ay) = a.box2d.center();
    let (bx, by) = b.box2d.center();
    let mut out = Vec::new();
    let mut emit = |name: &str, a_first: bool| {
        if let Some(r) = relations.index_of(name) {
            let (s, r, _) = relations.canonicalize(0, r, 1);
            out.push(OrientedRelation {
                relation: r,
                a_is_subject: (s == 0) == a_first,
            });
        }
    };
    if ax + cfg.lateral_gap_min < bx {
        emit("left_of", true);
    } else if bx + cfg.lateral_gap_min < ax {
        emit("left_of", false);
    }
    if ay + cfg.vertical_gap_min < by {
        emit("above", true);
    } else if by + cfg.vertical_gap_min < ay {
        emit("above", false);
    }
    if b.depth - a.depth > cfg.depth_gap_min {
        emit("in_front_of", true);
    } else if a.depth - b.depth > cfg.depth_gap_min {
        emit("in_front_of", false);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DerivationConfig {
        DerivationConfig::default()
    }

    #[test]
    fn quantize_depth_examples() {
        let c = cfg();
        assert_eq!(quantize_depth(0.0, &c).unwrap(), 0);
        assert_eq!(quantize_depth(35.0, &c).unwrap(), 3);
        assert_eq!(quantize_depth(500.0, &c).unwrap(), 7);
        assert_eq!(quantize_depth(79.999, &c).unwrap(), 7);
        assert!(matches!(
            quantize_depth(-1.0, &c),
            Err(DeriveError::NegativeDepth(_))
        ));
    }

    #[test]
    fn quantize_depth_monotone_and_surjective() {
        let c = cfg();
        let mut hit = vec![false; c.depth_bins];
        let mut prev = 0;
        for i in 0..8000 {
            let z = i as f64 * 0.01;
            let b = quantize_depth(z, &c).unwrap();
            assert!(b >= prev);
            prev = b;
            hit[b] = true;
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn grid_cell_examples() {
        assert_eq!(grid_cell_of_box(&Box2d::new(0.4, 0.4, 0.6, 0.6), 8), 36);
        assert_eq!(grid_cell_of_box(&Box2d::new(0.998, 0.998, 1.0, 1.0), 8), 63);
        let full = BinaryMask::new(4, 4, vec![true; 16]);
        assert_eq!(grid_cell_of_mask(&full, 8).unwrap(), 36);
        let empty = BinaryMask::new(4, 4, vec![false; 16]);
        assert!(matches!(
            grid_cell_of_mask(&empty, 8),
            Err(DeriveError::EmptyMask)
        ));
    }

    fn place(cx: f64, cy: f64, z: f64) -> Placement {
        Placement {
            box2d: Box2d::new(cx - 0.05, cy - 0.05, cx + 0.05, cy + 0.05),
            depth: z,
        }
    }

    #[test]
    fn identical_boxes_have_no_relation() {
        let r = RelationVocab::default_spatial();
        let a = place(0.5, 0.5, 10.0);
        assert!(pairwise_relation(&a, &a, &cfg(), &r).is_empty());
    }

    #[test]
    fn far_apart_boxes_get_left_of_and_in_front_of() {
        let r = RelationVocab::default_spatial();
        let left = r.index_of("left_of").unwrap();
        let front = r.index_of("in_front_of").unwrap();
        let a = place(0.2, 0.5, 5.0);
        let b = place(0.8, 0.5, 20.0);
        let rel = pairwise_relation(&a, &b, &cfg(), &r);
        assert!(rel.contains(&OrientedRelation {
            relation: left,
            a_is_subject: true
        }));
        assert!(rel.contains(&OrientedRelation {
            relation: front,
            a_is_subject: true
        }));
        // swapped arguments give the same stored edges
        let rev = pairwise_relation(&b, &a, &cfg(), &r);
        assert!(rev.contains(&OrientedRelation {
            relation: left,
            a_is_subject: false
        }));
    }
}
