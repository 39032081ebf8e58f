//! A deterministic toy world: geometric ground truth for sampled graphs
//! and a procedural renderer standing in for target-domain photographs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::derive::{Box2d, DerivedGraph, NodeTarget};
use crate::error::ModelError;
use crate::graph::{SceneGraph, Schema};
use crate::processor::{compose_layout, compose_nodes, BoxPrediction, ComposeMode, MaskPrediction};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAppearance {
    /// Base RGB color in `[0, 1]`.
    pub color: [f64; 3],
    /// Spatial frequency of the class texture, cycles per image width.
    pub frequency: f64,
    /// Peak texture offset added to every channel.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldConfig {
    /// Appearance per class name; must cover the whole vocabulary.
    pub classes: Vec<(String, ClassAppearance)>,
    pub noise_seed: u64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_scale: f64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        let a = |color: [f64; 3], frequency: f64| ClassAppearance {
            color,
            frequency,
            amplitude: 0.04,
        };
        let classes = vec![
            ("sky", a([0.55, 0.75, 0.95], 1.0)),
            ("road", a([0.35, 0.35, 0.38], 6.0)),
            ("tree", a([0.15, 0.55, 0.15], 12.0)),
            ("building", a([0.65, 0.45, 0.30], 8.0)),
            ("person", a([0.90, 0.20, 0.20], 4.0)),
            ("car", a([0.15, 0.20, 0.75], 3.0)),
            ("bus", a([0.95, 0.80, 0.10], 5.0)),
            ("truck", a([0.60, 0.20, 0.70], 7.0)),
            ("sidewalk", a([0.80, 0.75, 0.70], 10.0)),
        ];
        Self {
            classes: classes.into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
            noise_seed: 0,
            noise_scale: 0.02,
        }
    }
}

impl ToyWorldConfig {
    /// Appearance indexed by class, for every class of `schema`.
    pub fn resolve(&self, schema: &Schema) -> Result<Vec<ClassAppearance>, ModelError> {
        let mut out = vec![None; schema.classes.len()];
        for (name, app) in &self.classes {
            if app.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(ModelError::Config(format!("color of `{name}` outside [0, 1]")));
            }
            if let Some(i) = schema.classes.index_of(name) {
                out[i].get_or_insert(*app);
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, a)| {
                a.ok_or_else(|| {
                    ModelError::Config(format!(
                        "no appearance for class `{}`",
                        schema.classes.name_of(i).unwrap_or("?")
                    ))
                })
            })
            .collect()
    }
}

/// Box width/height at the nearest depth bin, per class name.
fn base_size(name: &str) -> (f64, f64) {
    match name {
        "person" => (0.07, 0.32),
        "car" => (0.22, 0.22),
        "bus" => (0.38, 0.34),
        "truck" => (0.30, 0.30),
        "tree" => (0.14, 0.42),
        "building" => (0.26, 0.46),
        "sidewalk" => (0.50, 0.12),
        _ => (0.2, 0.2),
    }
}

/// Shrink factor of depth bin `z` out of `bins`: 1 at the nearest bin,
/// 0.44 at the farthest for `Z = 8`.
pub fn depth_scale(z: usize, bins: usize) -> f64 {
    1.0 - 0.56 * z as f64 / (bins - 1).max(1) as f64
}

/// The toy ground-truth box of a node: sky covers the upper half, road the
/// lower half; every other class is centered on its grid cell with a class
/// size scaled by [`depth_scale`], clipped to the image.
pub fn toy_box(name: &str, cell: usize, z: usize, schema: &Schema) -> Box2d {
    match name {
        "sky" => Box2d::new(0.0, 0.0, 1.0, 0.5),
        "road" => Box2d::new(0.0, 0.5, 1.0, 1.0),
        _ => {
            let (r, c) = schema.cell_rc(cell);
            let l = schema.grid as f64;
            let (cx, cy) = ((c as f64 + 0.5) / l, (r as f64 + 0.5) / l);
            let (w, h) = base_size(name);
            let s = depth_scale(z, schema.depth_bins);
            let (w, h) = (w * s, h * s);
            Box2d::new(
                (cx - w / 2.0).max(0.0),
                (cy - h / 2.0).max(0.0),
                (cx + w / 2.0).min(1.0),
                (cy + h / 2.0).min(1.0),
            )
        }
    }
}

/// Binary silhouette of a class in box coordinates, `m×m`.
pub fn toy_mask(name: &str, m: usize) -> Vec<f64> {
    let inside = |u: f64, v: f64| -> bool {
        match name {
            "person" => {
                let head = (u - 0.5).powi(2) + (v - 0.13).powi(2) < 0.13f64.powi(2);
                head || (v >= 0.25 && (u - 0.5).abs() < 0.3)
            }
            "car" => (v >= 0.45 && v < 0.9) || (v >= 0.1 && (u - 0.5).abs() < 0.3) || (v >= 0.9 && ((u - 0.25).abs() < 0.1 || (u - 0.75).abs() < 0.1)),
            "bus" => (0.03..0.97).contains(&u) && (0.05..0.95).contains(&v),
            "truck" => (u < 0.35 && v >= 0.3) || (u >= 0.35 && v >= 0.05 && v < 0.9),
            "tree" => (u - 0.5).powi(2) + (v - 0.35).powi(2) < 0.35f64.powi(2) || ((u - 0.5).abs() < 0.1 && v >= 0.5),
            "building" => v >= if u < 0.5 { 0.05 } else { 0.25 },
            _ => true,
        }
    };
    let mut out = Vec::with_capacity(m * m);
    for y in 0..m {
        for x in 0..m {
            let (u, v) = ((x as f64 + 0.5) / m as f64, (y as f64 + 0.5) / m as f64);
            out.push(if inside(u, v) { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Ground-truth targets of every node of `g` under the toy rule.
pub fn toy_targets(g: &SceneGraph, schema: &Schema, mask_size: usize) -> Vec<NodeTarget> {
    g.nodes
        .iter()
        .map(|n| {
            let name = schema.classes.name_of(n.class).unwrap_or("");
            NodeTarget {
                box2d: toy_box(name, n.cell(), n.depth_bin(), schema),
                mask: toy_mask(name, mask_size),
            }
        })
        .collect()
}

pub fn toy_example(g: SceneGraph, schema: &Schema, mask_size: usize) -> DerivedGraph {
    let targets = toy_targets(&g, schema, mask_size);
    DerivedGraph { graph: g, targets }
}

/// Semantic class map of a graph's ground truth (hard composition of the
/// toy targets). Pixels no node claims get the sky class in the upper half
/// and road below.
pub fn toy_semantic_map(g: &SceneGraph, schema: &Schema, height: usize, width: usize) -> Vec<u16> {
    let targets = toy_targets(g, schema, 32);
    let boxes: Vec<BoxPrediction> = targets.iter().map(|t| BoxPrediction::from_box(&t.box2d)).collect();
    let masks: Vec<MaskPrediction> = targets
        .into_iter()
        .map(|t| MaskPrediction { size: 32, data: t.mask })
        .collect();
    let layout = compose_layout(
        &compose_nodes(g, schema),
        &boxes,
        &masks,
        schema.classes.len(),
        height,
        width,
        ComposeMode::Hard,
    )
    .expect("toy targets are consistent");
    let sky = schema.classes.index_of("sky").unwrap_or(0) as u16;
    let road = schema.classes.index_of("road").unwrap_or(0) as u16;
    layout
        .argmax()
        .into_iter()
        .enumerate()
        .map(|(p, c)| match c {
            Some(c) => c as u16,
            None if p / width < height / 2 => sky,
            None => road,
        })
        .collect()
}

/// Renders a class map as a `[3, H, W]` image: base color, plus a class
/// texture `amplitude·sin(2π f x/W)·cos(2π f y/W)`, plus seeded Gaussian
/// noise, clamped to `[0, 1]`.
pub fn render_toy_target(
    semantic: &[u16],
    height: usize,
    width: usize,
    appearance: &[ClassAppearance],
    noise_scale: f64,
    seed: u64,
) -> Result<Tensor, ModelError> {
    if semantic.len() != height * width {
        return Err(ModelError::Shape(format!(
            "class map has {} pixels, expected {height}×{width}",
            semantic.len()
        )));
    }
    if let Some(&c) = semantic.iter().find(|&&c| c as usize >= appearance.len()) {
        return Err(ModelError::Index(format!("class id {c} has no appearance")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_scale.max(0.0)).map_err(|e| ModelError::Config(e.to_string()))?;
    let plane = height * width;
    let mut out = vec![0.0; 3 * plane];
    let tau = std::f64::consts::TAU;
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let a = &appearance[semantic[p] as usize];
            let (fx, fy) = (x as f64 / width as f64, y as f64 / width as f64);
            let tex = a.amplitude * (tau * a.frequency * fx).sin() * (tau * a.frequency * fy).cos();
            for ch in 0..3 {
                let v = a.color[ch] + tex + noise.sample(&mut rng);
                out[ch * plane + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(&[3, height, width], out))
}

/// Nearest base color per pixel of a `[3, H, W]` image.
pub fn oracle_segment(image: &Tensor, appearance: &[ClassAppearance]) -> Vec<u16> {
    let plane = image.dim(1) * image.dim(2);
    let d = image.data();
    (0..plane)
        .map(|p| {
            let mut best = (f64::INFINITY, 0u16);
            for (c, a) in appearance.iter().enumerate() {
                let dist: f64 = (0..3).map(|ch| (d[ch * plane + p] - a.color[ch]).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, c as u16);
                }
            }
            best.1
        })
        .collect()
}

/// Fraction of pixels where two class maps agree.
pub fn pixel_accuracy(a: &[u16], b: &[u16]) -> f64 {
    assert_eq!(a.len(), b.len(), "class maps differ in size");
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive::{sample_corpus, SamplerConfig};

    #[test]
    fn all_road_map_stays_near_road_color() {
        let s = Schema::default();
        let app = ToyWorldConfig::default().resolve(&s).unwrap();
        let road = s.classes.index_of("road").unwrap();
        let map = vec![road as u16; 16 * 32];
        let img = render_toy_target(&map, 16, 32, &app, 0.0, 1).unwrap();
        let plane = 16 * 32;
        for ch in 0..3 {
            for p in 0..plane {
                assert!((img.data()[ch * plane + p] - app[road].color[ch]).abs() <= app[road].amplitude + 1e-12);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_segmentable() {
        let s = Schema::default();
        let cfg = ToyWorldConfig::default();
        let app = cfg.resolve(&s).unwrap();
        let mut correct = 0.0;
        let graphs = sample_corpus(&SamplerConfig::default(), &s, 20).unwrap();
        for (i, g) in graphs.iter().enumerate() {
            let map = toy_semantic_map(g, &s, 64, 128);
            let a = render_toy_target(&map, 64, 128, &app, cfg.noise_scale, i as u64).unwrap();
            let b = render_toy_target(&map, 64, 128, &app, cfg.noise_scale, i as u64).unwrap();
            assert_eq!(a, b);
            correct += pixel_accuracy(&oracle_segment(&a, &app), &map);
        }
        assert!(correct / 20.0 >= 0.99);
    }

    #[test]
    fn nearer_bins_give_larger_boxes() {
        let s = Schema::default();
        for name in ["person", "car", "bus", "truck", "tree", "building"] {
            let areas: Vec<f64> = (0..8).map(|z| toy_box(name, 36, z, &s).area()).collect();
            assert!(areas.windows(2).all(|w| w[0] > w[1]), "{name}: {areas:?}");
        }
    }

    #[test]
    fn unknown_class_id_rejected() {
        let s = Schema::default();
        let app = ToyWorldConfig::default().resolve(&s).unwrap();
        assert!(render_toy_target(&[99; 4], 2, 2, &app, 0.0, 0).is_err());
    }
}
