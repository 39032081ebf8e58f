//! Response bodies and the pure functions that build them.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use sg2scene_core::graph::SceneGraph;
use sg2scene_core::harness::render::{image_png, layout_indices, layout_palette, layout_png};
use sg2scene_core::layout::Layout;

use crate::{Loaded, ServiceState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
    /// Document path of the offending value, e.g. `nodes[2].class`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub sha256: String,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub processor: Option<CheckpointInfo>,
    pub generator: Option<CheckpointInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub index: usize,
    pub name: String,
    pub background: bool,
    /// Layout palette color.
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub index: usize,
    pub name: String,
    pub dual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabResponse {
    /// Value of a document's `classes` field.
    pub vocabulary: String,
    pub classes: Vec<ClassEntry>,
    /// `(alias, class)` names accepted in documents.
    pub aliases: Vec<(String, String)>,
    pub relations: Vec<RelationEntry>,
    /// Location grid side `L`; cells are `0..L²`, row-major.
    pub grid: usize,
    pub depth_bins: usize,
    /// `[H, W]` of layouts and images.
    pub resolution: [usize; 2],
    /// Layout palette index and color of pixels no node claims.
    pub unclaimed_index: usize,
    pub unclaimed_color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEntry {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateResponse {
    pub valid: bool,
    pub violations: Vec<ViolationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBox {
    pub node: usize,
    pub class: String,
    /// `[x0, y0, x1, y1]`, normalized to the image.
    #[serde(rename = "box")]
    pub bounds: [f64; 4],
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub node: usize,
    pub size: usize,
    pub mean: f64,
    /// Fraction of mask cells above 0.5.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutImage {
    pub width: usize,
    pub height: usize,
    /// Base64 8-bit indexed PNG under `palette`.
    pub png: String,
    /// Class index per palette entry is its position; the last entry is
    /// the unclaimed color.
    pub palette: Vec<[u8; 3]>,
    /// Row-major per-pixel class index (`classes` for unclaimed pixels).
    pub argmax: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutResponse {
    pub boxes: Vec<NodeBox>,
    pub masks: Vec<MaskSummary>,
    pub layout: LayoutImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Base64 8-bit RGB PNG.
    pub png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image: RgbImage,
    #[serde(flatten)]
    pub layout: LayoutResponse,
}

fn info<T>(l: &Option<Loaded<T>>) -> Option<CheckpointInfo> {
    l.as_ref().map(|l| CheckpointInfo {
        sha256: l.sha256.clone(),
        step: l.step,
    })
}

pub(crate) fn health(s: &ServiceState) -> HealthResponse {
    HealthResponse {
        status: "ok".into(),
        processor: info(&s.processor),
        generator: info(&s.generator),
    }
}

pub(crate) fn vocab(s: &ServiceState) -> VocabResponse {
    let c = &s.schema.classes;
    let palette = layout_palette(c);
    let aliases = serde_json::to_value(c)
        .ok()
        .and_then(|v| serde_json::from_value(v["aliases"].clone()).ok())
        .unwrap_or_default();
    let r = &s.schema.relations;
    VocabResponse {
        vocabulary: c.name().to_string(),
        classes: (0..c.len())
            .map(|i| ClassEntry {
                index: i,
                name: c.name_of(i).unwrap_or_default().to_string(),
                background: c.is_background(i),
                color: palette[i],
            })
            .collect(),
        aliases,
        relations: (0..r.len())
            .map(|i| RelationEntry {
                index: i,
                name: r.name_of(i).unwrap_or_default().to_string(),
                dual: r.name_of(r.dual(i)).unwrap_or_default().to_string(),
            })
            .collect(),
        grid: s.schema.grid,
        depth_bins: s.schema.depth_bins,
        resolution: s.resolution,
        unclaimed_index: c.len(),
        unclaimed_color: palette[c.len()],
    }
}

fn compose(s: &ServiceState, g: &SceneGraph) -> Result<(LayoutResponse, Layout), String> {
    let p = &s.processor.as_ref().ok_or("no processor checkpoint loaded")?.model;
    let (boxes, masks) = p.predict(g).map_err(|e| e.to_string())?;
    let [h, w] = s.resolution;
    let layout = p.layout(g, &s.schema, h, w).map_err(|e| e.to_string())?;
    let classes = &s.schema.classes;
    let png = layout_png(&layout, classes).map_err(|e| e.to_string())?;
    let resp = LayoutResponse {
        boxes: boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let bb = b.to_box();
                NodeBox {
                    node: i,
                    class: classes.name_of(g.nodes[i].class).unwrap_or_default().to_string(),
                    bounds: [bb.x0, bb.y0, bb.x1, bb.y1],
                    area: b.area(),
                }
            })
            .collect(),
        masks: masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let n = m.data.len().max(1) as f64;
                MaskSummary {
                    node: i,
                    size: m.size,
                    mean: m.data.iter().sum::<f64>() / n,
                    coverage: m.data.iter().filter(|&&v| v > 0.5).count() as f64 / n,
                }
            })
            .collect(),
        layout: LayoutImage {
            width: w,
            height: h,
            png: STANDARD.encode(png),
            palette: layout_palette(classes),
            argmax: layout_indices(&layout),
        },
    };
    Ok((resp, layout))
}

pub(crate) fn layout(s: &ServiceState, g: &SceneGraph) -> Result<LayoutResponse, String> {
    compose(s, g).map(|(r, _)| r)
}

pub(crate) fn generate(s: &ServiceState, g: &SceneGraph) -> Result<GenerateResponse, String> {
    let (layout, t) = compose(s, g)?;
    let gen = &s.generator.as_ref().ok_or("no generator checkpoint loaded")?.model;
    let image = gen.generate(&t).map_err(|e| e.to_string())?;
    let png = image_png(&image).map_err(|e| e.to_string())?;
    Ok(GenerateResponse {
        image: RgbImage {
            width: t.width(),
            height: t.height(),
            png: STANDARD.encode(png),
        },
        layout,
    })
}
