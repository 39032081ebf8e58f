use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    grid_cell_of_box, grid_cell_of_mask, pairwise_relation, quantize_depth, Box2d,
    DerivationConfig, Placement,
};
use crate::error::DeriveError;
use crate::graph::{SceneEdge, SceneGraph, SceneNode, Schema};
use crate::raster::{self, GrayImage};

/// One annotated 3D object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub class: usize,
    pub instance_id: u16,
    /// Camera-frame center (x, y, z) in meters; z is depth.
    pub center: [f64; 3],
    /// (w, h, d) in meters.
    pub extent: [f64; 3],
    /// Projected 2D box, normalized.
    pub box2d: Box2d,
}

/// Simulation ground truth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Class index per pixel (row-major); values outside the vocabulary
    /// are unlabelled.
    pub semantic: Vec<u16>,
    /// Instance id per pixel; 0 means no instance.
    pub instance: Vec<u16>,
    /// Optional per-pixel depth in meters.
    pub depth: Option<Vec<f32>>,
    pub objects: Vec<ObjectAnnotation>,
}

/// Binary region mask over an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Mean normalized position of set pixels (pixel centers).
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (p, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            sx += (p % self.width) as f64 + 0.5;
            sy += (p / self.width) as f64 + 0.5;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64 / self.width as f64, sy / n as f64 / self.height as f64))
    }

    /// Normalized bounding box of set pixels.
    pub fn bounding_box(&self) -> Option<Box2d> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (p, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (p % self.width, p / self.width);
            bb = Some(match bb {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bb.map(|(x0, y0, x1, y1)| {
            Box2d::new(
                x0 as f64 / self.width as f64,
                y0 as f64 / self.height as f64,
                (x1 + 1) as f64 / self.width as f64,
                (y1 + 1) as f64 / self.height as f64,
            )
        })
    }

    /// Resamples the part of the mask inside `b` to `size×size` by
    /// nearest-pixel lookup at cell centers.
    pub fn crop_resize(&self, b: &Box2d, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size);
        for v in 0..size {
            let y = b.y0 + (v as f64 + 0.5) / size as f64 * (b.y1 - b.y0);
            let py = ((y * self.height as f64) as usize).min(self.height - 1);
            for u in 0..size {
                let x = b.x0 + (u as f64 + 0.5) / size as f64 * (b.x1 - b.x0);
                let px = ((x * self.width as f64) as usize).min(self.width - 1);
                out.push(if self.data[py * self.width + px] { 1.0 } else { 0.0 });
            }
        }
        out
    }
}

/// Supervision for one node: its box and `M×M` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTarget {
    pub box2d: Box2d,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedGraph {
    pub graph: SceneGraph,
    /// One entry per node, in node order.
    pub targets: Vec<NodeTarget>,
}

impl AnnotationRecord {
    pub fn validate(&self, schema: &Schema) -> Result<(), DeriveError> {
        let bad = |m: String| Err(DeriveError::InvalidRecord(format!("{}: {m}", self.id)));
        let n = self.width * self.height;
        if n == 0 {
            return bad("empty image".into());
        }
        if self.semantic.len() != n || self.instance.len() != n {
            return bad("semantic/instance map size mismatch".into());
        }
        if let Some(d) = &self.depth {
            if d.len() != n {
                return bad("depth map size mismatch".into());
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.box2d.is_valid() {
                return bad(format!("object {i} has an invalid 2D box"));
            }
            if !schema.classes.is_object(o.class) {
                return bad(format!("object {i} class {} is not an object class", o.class));
            }
            if o.center[2] < 0.0 || !o.center.iter().all(|v| v.is_finite()) {
                return bad(format!("object {i} has an invalid center"));
            }
            if o.instance_id == 0 || !self.instance.contains(&o.instance_id) {
                return bad(format!(
                    "object {i} instance id {} not present in the instance map",
                    o.instance_id
                ));
            }
        }
        Ok(())
    }

    pub fn class_mask(&self, class: usize) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.semantic.iter().map(|&c| c as usize == class).collect(),
        )
    }

    pub fn instance_mask(&self, id: u16) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.instance.iter().map(|&c| c == id).collect(),
        )
    }
}

/// Builds the scene graph and per-node targets for one record.
///
/// Object nodes come first (annotation order), then one node per background
/// class covering more than `background_min_area` of the image (vocabulary
/// order). Edges relate object pairs only, each object keeping its
/// `max_edges_per_node` nearest related neighbours.
pub fn derive_graph(
    rec: &AnnotationRecord,
    cfg: &DerivationConfig,
    schema: &Schema,
) -> Result<DerivedGraph, DeriveError> {
    cfg.validate()?;
    if cfg.grid != schema.grid || cfg.depth_bins != schema.depth_bins {
        return Err(DeriveError::InvalidConfig(
            "derivation grid/depth bins disagree with the schema".into(),
        ));
    }
    rec.validate(schema)?;
    let mut nodes = Vec::new();
    let mut targets = Vec::new();
    let mut placements = Vec::new();
    for o in &rec.objects {
        let cell = grid_cell_of_box(&o.box2d, cfg.grid);
        let z = quantize_depth(o.center[2], cfg)?;
        nodes.push(SceneNode::new(o.class, cell, z, schema));
        targets.push(NodeTarget {
            box2d: o.box2d,
            mask: rec.instance_mask(o.instance_id).crop_resize(&o.box2d, cfg.mask_size),
        });
        placements.push(Placement {
            box2d: o.box2d,
            depth: o.center[2],
        });
    }

    let total = (rec.width * rec.height) as f64;
    for class in 0..schema.classes.background_classes().len() {
        let mask = rec.class_mask(class);
        let area = mask.count() as f64 / total;
        if area <= cfg.background_min_area {
            continue;
        }
        let cell = grid_cell_of_mask(&mask, cfg.grid)?;
        let bbox = mask.bounding_box().ok_or(DeriveError::EmptyMask)?;
        let z = if schema.classes.name_of(class) == Some("sky") {
            cfg.depth_bins - 1
        } else if let Some(depth) = &rec.depth {
            let mut vals: Vec<f64> = depth
                .iter()
                .zip(&mask.data)
                .filter(|(_, &m)| m)
                .map(|(&d, _)| d as f64)
                .collect();
            vals.sort_by(f64::total_cmp);
            quantize_depth(vals[vals.len() / 2], cfg)?
        } else {
            cfg.depth_bins / 2
        };
        nodes.push(SceneNode::new(class, cell, z, schema));
        targets.push(NodeTarget {
            box2d: bbox,
            mask: mask.crop_resize(&bbox, cfg.mask_size),
        });
    }

    let edges = object_edges(&placements, cfg, schema);
    let mut meta = serde_json::Map::new();
    meta.insert("source".into(), rec.id.clone().into());
    Ok(DerivedGraph {
        graph: SceneGraph { nodes, edges, meta },
        targets,
    })
}

fn object_edges(placements: &[Placement], cfg: &DerivationConfig, schema: &Schema) -> Vec<SceneEdge> {
    let n = placements.len();
    let mut candidates = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let rels = pairwise_relation(&placements[i], &placements[j], cfg, &schema.relations);
            if rels.is_empty() {
                continue;
            }
            let (ax, ay) = placements[i].box2d.center();
            let (bx, by) = placements[j].box2d.center();
            let dist = (ax - bx).hypot(ay - by);
            candidates.push((dist, i, j, rels));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut degree = vec![0usize; n];
    let mut kept = Vec::new();
    for (_, i, j, rels) in candidates {
        if degree[i] >= cfg.max_edges_per_node || degree[j] >= cfg.max_edges_per_node {
            continue;
        }
        degree[i] += 1;
        degree[j] += 1;
        kept.push((i, j, rels));
    }
    kept.sort_by_key(|k| (k.0, k.1));
    let mut edges = Vec::new();
    for (i, j, mut rels) in kept {
        rels.sort_by_key(|r| r.relation);
        for r in rels {
            let (s, o) = if r.a_is_subject { (i, j) } else { (j, i) };
            edges.push(SceneEdge::new(s, r.relation, o));
        }
    }
    edges
}

// ---- on-disk record format --------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    #[serde(rename = "box")]
    box2d: [f64; 4],
    center: [f64; 3],
    class: String,
    extent: [f64; 3],
    instance: u16,
}

/// Source of annotation records. Converters for specific simulator
/// distributions implement this and yield records in the neutral layout.
pub trait RecordSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn load(&self, index: usize, schema: &Schema) -> Result<AnnotationRecord, DeriveError>;
}

/// A directory with one sub-directory per record, each holding
/// `semantic.png`, `instance.png`, `objects.json` and optionally
/// `depth.png` (16-bit, centimeters).
pub struct DirectorySource {
    records: Vec<PathBuf>,
}

impl DirectorySource {
    pub fn open(root: &Path) -> Result<Self, DeriveError> {
        let io = |source| DeriveError::Io {
            path: root.to_path_buf(),
            source,
        };
        let mut records = Vec::new();
        for entry in fs::read_dir(root).map_err(io)? {
            let p = entry.map_err(io)?.path();
            if p.is_dir() && p.join("objects.json").exists() {
                records.push(p);
            }
        }
        records.sort();
        Ok(Self { records })
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.records
    }
}

impl RecordSource for DirectorySource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn load(&self, index: usize, schema: &Schema) -> Result<AnnotationRecord, DeriveError> {
        load_record(&self.records[index], schema)
    }
}

pub fn load_record(dir: &Path, schema: &Schema) -> Result<AnnotationRecord, DeriveError> {
    let fmt_err = |path: &Path, message: String| DeriveError::Format {
        path: path.to_path_buf(),
        message,
    };
    let read_png = |name: &str| -> Result<GrayImage, DeriveError> {
        let p = dir.join(name);
        raster::read_gray(&p).map_err(|e| fmt_err(&p, e.to_string()))
    };
    let semantic = read_png("semantic.png")?;
    let instance = read_png("instance.png")?;
    if (semantic.width, semantic.height) != (instance.width, instance.height) {
        return Err(fmt_err(dir, "semantic and instance maps differ in size".into()));
    }
    let depth_path = dir.join("depth.png");
    let depth = if depth_path.exists() {
        let d = read_png("depth.png")?;
        if (d.width, d.height) != (semantic.width, semantic.height) {
            return Err(fmt_err(&depth_path, "depth map size mismatch".into()));
        }
        Some(d.data.iter().map(|&v| v as f32 / 100.0).collect())
    } else {
        None
    };
    let objects_path = dir.join("objects.json");
    let text = fs::read_to_string(&objects_path).map_err(|source| DeriveError::Io {
        path: objects_path.clone(),
        source,
    })?;
    let docs: Vec<ObjectDoc> =
        serde_json::from_str(&text).map_err(|e| fmt_err(&objects_path, e.to_string()))?;
    let mut objects = Vec::with_capacity(docs.len());
    for (i, d) in docs.into_iter().enumerate() {
        let class = schema
            .classes
            .index_of(&d.class)
            .ok_or_else(|| fmt_err(&objects_path, format!("object {i}: unknown class `{}`", d.class)))?;
        objects.push(ObjectAnnotation {
            class,
            instance_id: d.instance,
            center: d.center,
            extent: d.extent,
            box2d: Box2d::new(d.box2d[0], d.box2d[1], d.box2d[2], d.box2d[3]),
        });
    }
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AnnotationRecord {
        id,
        width: semantic.width,
        height: semantic.height,
        semantic: semantic.data,
        instance: instance.data,
        depth,
        objects,
    })
}

/// Writes a record in the directory layout read by [`load_record`].
pub fn save_record(rec: &AnnotationRecord, dir: &Path, schema: &Schema) -> Result<(), DeriveError> {
    let io = |source| DeriveError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let to_err = |e: raster::RasterError| DeriveError::Format {
        path: dir.to_path_buf(),
        message: e.to_string(),
    };
    let gray = |data: Vec<u16>| GrayImage {
        width: rec.width,
        height: rec.height,
        data,
    };
    raster::write_gray8(&dir.join("semantic.png"), &gray(rec.semantic.clone())).map_err(to_err)?;
    raster::write_gray16(&dir.join("instance.png"), &gray(rec.instance.clone())).map_err(to_err)?;
    if let Some(d) = &rec.depth {
        let cm = d.iter().map(|&v| (v * 100.0).round().clamp(0.0, 65535.0) as u16).collect();
        raster::write_gray16(&dir.join("depth.png"), &gray(cm)).map_err(to_err)?;
    }
    let docs: Vec<ObjectDoc> = rec
        .objects
        .iter()
        .map(|o| ObjectDoc {
            box2d: o.box2d.to_array(),
            center: o.center,
            class: schema.classes.name_of(o.class).unwrap_or("?").to_string(),
            extent: o.extent,
            instance: o.instance_id,
        })
        .collect();
    let text = serde_json::to_string_pretty(&docs).expect("objects serialize");
    fs::write(dir.join("objects.json"), text).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_graph;

    /// 4×4 toy frame: sky on the top row, road on the bottom two rows,
    /// one car (instance 1) covering pixels (1,1) and (2,1).
    fn toy_record() -> AnnotationRecord {
        let (sky, road, car, building) = (0u16, 1u16, 5u16, 3u16);
        #[rustfmt::skip]
        let semantic = vec![
            sky, sky, sky, sky,
            building, car, car, building,
            road, road, road, road,
            road, road, road, road,
        ];
        let mut instance = vec![0u16; 16];
        instance[5] = 1;
        instance[6] = 1;
        AnnotationRecord {
            id: "toy".into(),
            width: 4,
            height: 4,
            semantic,
            instance,
            depth: None,
            objects: vec![ObjectAnnotation {
                class: 5,
                instance_id: 1,
                center: [0.0, 1.0, 12.0],
                extent: [1.8, 1.5, 4.2],
                box2d: Box2d::new(0.25, 0.25, 0.75, 0.5),
            }],
        }
    }

    #[test]
    fn toy_record_by_hand() {
        let s = Schema::default();
        let cfg = DerivationConfig {
            mask_size: 2,
            ..DerivationConfig::default()
        };
        let d = derive_graph(&toy_record(), &cfg, &s).unwrap();
        let g = &d.graph;
        // car, then sky, road, building in vocabulary order
        let classes: Vec<_> = g.nodes.iter().map(|n| n.class).collect();
        assert_eq!(classes, vec![5, 0, 1, 3]);
        // car center (0.5, 0.375) -> row 3, col 4; depth 12 m -> bin 1
        assert_eq!(g.nodes[0].cell(), 3 * 8 + 4);
        assert_eq!(g.nodes[0].depth_bin(), 1);
        // sky centroid (0.5, 0.125) -> row 1, col 4; farthest bin
        assert_eq!(g.nodes[1].cell(), 8 + 4);
        assert_eq!(g.nodes[1].depth_bin(), 7);
        // road centroid (0.5, 0.75) -> row 6; no depth map -> Z/2
        assert_eq!(g.nodes[2].cell(), 6 * 8 + 4);
        assert_eq!(g.nodes[2].depth_bin(), 4);
        // building pixels at x=0 and x=3 of row 1: centroid (0.5, 0.375)
        assert_eq!(g.nodes[3].cell(), 3 * 8 + 4);
        assert!(g.edges.is_empty());
        assert_eq!(d.targets[2].box2d, Box2d::new(0.0, 0.5, 1.0, 1.0));
        assert_eq!(d.targets[0].mask, vec![1.0; 4]);
        // left sample column lands on the car pixels
        assert_eq!(d.targets[3].mask, vec![0.0, 1.0, 0.0, 1.0]);
        assert!(validate_graph(g, &s).is_empty());
    }

    #[test]
    fn full_sky_record_gives_single_node() {
        let s = Schema::default();
        let rec = AnnotationRecord {
            id: "sky".into(),
            width: 3,
            height: 2,
            semantic: vec![0; 6],
            instance: vec![0; 6],
            depth: None,
            objects: vec![],
        };
        let d = derive_graph(&rec, &DerivationConfig::default(), &s).unwrap();
        assert_eq!(d.graph.nodes.len(), 1);
        assert_eq!(d.graph.nodes[0].class, 0);
        assert!(d.graph.edges.is_empty());
    }

    #[test]
    fn near_car_in_front_of_far_car() {
        let s = Schema::default();
        let mut rec = toy_record();
        rec.instance[9] = 2;
        rec.objects[0].center[2] = 5.0;
        rec.objects.push(ObjectAnnotation {
            class: 5,
            instance_id: 2,
            center: [0.0, 1.0, 20.0],
            extent: [1.8, 1.5, 4.2],
            box2d: Box2d::new(0.27, 0.26, 0.73, 0.52),
        });
        let d = derive_graph(&rec, &DerivationConfig::default(), &s).unwrap();
        let front = s.relations.index_of("in_front_of").unwrap();
        assert_eq!(d.graph.edges, vec![SceneEdge::new(0, front, 1)]);
    }

    #[test]
    fn invalid_records_rejected() {
        let s = Schema::default();
        let mut rec = toy_record();
        rec.objects[0].box2d = Box2d::new(0.5, 0.2, 0.4, 0.3);
        assert!(derive_graph(&rec, &DerivationConfig::default(), &s).is_err());
        let mut rec = toy_record();
        rec.objects[0].instance_id = 9;
        assert!(derive_graph(&rec, &DerivationConfig::default(), &s).is_err());
        let mut rec = toy_record();
        rec.semantic.pop();
        assert!(derive_graph(&rec, &DerivationConfig::default(), &s).is_err());
    }

    #[test]
    fn record_directory_roundtrip() {
        let s = Schema::default();
        let dir = tempfile::tempdir().unwrap();
        let mut rec = toy_record();
        rec.depth = Some(vec![12.5; 16]);
        let path = dir.path().join("toy");
        save_record(&rec, &path, &s).unwrap();
        let back = load_record(&path, &s).unwrap();
        assert_eq!(back, rec);
        let src = DirectorySource::open(dir.path()).unwrap();
        assert_eq!(src.len(), 1);
    }
}
