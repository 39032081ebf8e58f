//! Scene layout composition from per-node boxes and masks.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Tape, Var};
use crate::error::ModelError;
use crate::graph::{SceneGraph, Schema};
use crate::layout::Layout;
use crate::tensor::Tensor;

use super::{BoxPrediction, MaskPrediction};

/// Keeps the soft normalizer away from zero on uncovered pixels.
pub const SOFT_COMPOSE_DELTA: f64 = 1e-6;
/// Nearness weight `exp(−β·z)` of the soft compositor.
pub const DEFAULT_NEARNESS_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ComposeMode {
    /// Painter's algorithm: far to near, a node claims pixels where its
    /// warped mask exceeds 0.5.
    Hard,
    /// Per-pixel normalized weighting by warped mask and nearness.
    Soft { beta: f64 },
}

/// What the compositor needs to know about a node besides its box/mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComposeNode {
    pub class: usize,
    pub depth_bin: usize,
    pub background: bool,
}

pub fn compose_nodes(g: &SceneGraph, schema: &Schema) -> Vec<ComposeNode> {
    g.nodes
        .iter()
        .map(|n| ComposeNode {
            class: n.class,
            depth_bin: n.depth_bin(),
            background: schema.classes.is_background(n.class),
        })
        .collect()
}

/// Bilinear sample of a mask placed in a box, with its derivatives.
struct Sample {
    value: f64,
    /// d value / d (cx, cy, w, h).
    d_box: [f64; 4],
    /// Mask cells and bilinear weights.
    taps: [(usize, f64); 4],
}

fn sample(mask: &[f64], m: usize, b: &[f64], u: f64, v: f64) -> Option<Sample> {
    let (cx, cy, w, h) = (b[0], b[1], b[2], b[3]);
    if !(w > 0.0 && h > 0.0) {
        return None;
    }
    let s = (u - (cx - w / 2.0)) / w;
    let t = (v - (cy - h / 2.0)) / h;
    if !(0.0..1.0).contains(&s) || !(0.0..1.0).contains(&t) {
        return None;
    }
    let axis = |r: f64| -> (f64, f64) {
        let f = r * m as f64 - 0.5;
        if f < 0.0 {
            (0.0, 0.0)
        } else if f > (m - 1) as f64 {
            ((m - 1) as f64, 0.0)
        } else {
            (f, m as f64)
        }
    };
    let (fx, dfx) = axis(s);
    let (fy, dfy) = axis(t);
    let x0 = (fx.floor() as usize).min(m - 1);
    let y0 = (fy.floor() as usize).min(m - 1);
    let x1 = (x0 + 1).min(m - 1);
    let y1 = (y0 + 1).min(m - 1);
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let at = |y: usize, x: usize| mask[y * m + x];
    let (m00, m01, m10, m11) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
    let value = (1.0 - ay) * ((1.0 - ax) * m00 + ax * m01) + ay * ((1.0 - ax) * m10 + ax * m11);
    let dv_dfx = (1.0 - ay) * (m01 - m00) + ay * (m11 - m10);
    let dv_dfy = (1.0 - ax) * (m10 - m00) + ax * (m11 - m01);
    let ds = dv_dfx * dfx;
    let dt = dv_dfy * dfy;
    Some(Sample {
        value,
        d_box: [-ds / w, -dt / h, ds * (0.5 - s) / w, dt * (0.5 - t) / h],
        taps: [
            (y0 * m + x0, (1.0 - ay) * (1.0 - ax)),
            (y0 * m + x1, (1.0 - ay) * ax),
            (y1 * m + x0, ay * (1.0 - ax)),
            (y1 * m + x1, ay * ax),
        ],
    })
}

fn pixel_center(p: usize, n: usize) -> f64 {
    (p as f64 + 0.5) / n as f64
}

/// The mask bilinearly resampled into its box on an `h×w` canvas; zero
/// outside the box.
pub fn warp_mask(mask: &MaskPrediction, b: &BoxPrediction, h: usize, w: usize) -> Vec<f64> {
    let bx = b.to_array();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let v = pixel_center(y, h);
        for x in 0..w {
            if let Some(s) = sample(&mask.data, mask.size, &bx, pixel_center(x, w), v) {
                out[y * w + x] = s.value;
            }
        }
    }
    out
}

/// Painting order: farthest bin first; at equal bins background before
/// objects; remaining ties by class and then by box and mask values, so
/// the order depends only on node content, never on node indices.
fn paint_order(nodes: &[ComposeNode], boxes: &[BoxPrediction], masks: &[MaskPrediction]) -> Vec<usize> {
    let lex = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| {
        let (na, nb) = (&nodes[a], &nodes[b]);
        nb.depth_bin
            .cmp(&na.depth_bin)
            .then(nb.background.cmp(&na.background))
            .then(na.class.cmp(&nb.class))
            .then_with(|| lex(&boxes[a].to_array(), &boxes[b].to_array()))
            .then_with(|| lex(&masks[a].data, &masks[b].data))
    });
    order
}

/// Composes a layout from one box and one mask per node.
pub fn compose_layout(
    nodes: &[ComposeNode],
    boxes: &[BoxPrediction],
    masks: &[MaskPrediction],
    classes: usize,
    height: usize,
    width: usize,
    mode: ComposeMode,
) -> Result<Layout, ModelError> {
    if boxes.len() != nodes.len() || masks.len() != nodes.len() {
        return Err(ModelError::Shape(format!(
            "{} nodes, {} boxes, {} masks",
            nodes.len(),
            boxes.len(),
            masks.len()
        )));
    }
    if let Some(n) = nodes.iter().find(|n| n.class >= classes) {
        return Err(ModelError::Index(format!("class {} outside 0..{classes}", n.class)));
    }
    if let Some(k) = masks.iter().find(|k| k.size == 0 || k.data.len() != k.size * k.size) {
        return Err(ModelError::Shape(format!("mask of size {} has {} values", k.size, k.data.len())));
    }
    match mode {
        ComposeMode::Hard => {
            let plane = height * width;
            let mut data = vec![0.0; classes * plane];
            for i in paint_order(nodes, boxes, masks) {
                let warped = warp_mask(&masks[i], &boxes[i], height, width);
                for (p, &a) in warped.iter().enumerate() {
                    if a > 0.5 {
                        for c in 0..classes {
                            data[c * plane + p] = 0.0;
                        }
                        data[nodes[i].class * plane + p] = a;
                    }
                }
            }
            Ok(Layout::from_tensor(&Tensor::new(&[classes, height, width], data)))
        }
        ComposeMode::Soft { beta } => {
            let m = masks.first().map_or(1, |k| k.size);
            let bt: Vec<f64> = boxes.iter().flat_map(|b| b.to_array()).collect();
            let mt: Vec<f64> = masks.iter().flat_map(|k| k.data.iter().copied()).collect();
            let op = SoftCompose::new(nodes, classes, height, width, m, beta);
            let out = op.forward(&bt, &mt);
            Ok(Layout::from_tensor(&out))
        }
    }
}

/// Soft composition on a tape. `boxes` is `[n, 4]` (cx, cy, w, h) and
/// `masks` holds `n·M·M` values. Output is `[C, H, W]` with
/// `t_c = Σ_{i∈c} a_i² q_i / (Σ_j a_j q_j + δ)`, where `a_i` is the warped
/// mask and `q_i = exp(−β·z_i)`.
#[allow(clippy::too_many_arguments)]
pub fn soft_compose(
    tape: &mut Tape,
    boxes: Var,
    masks: Var,
    nodes: &[ComposeNode],
    classes: usize,
    height: usize,
    width: usize,
    beta: f64,
) -> Result<Var, ModelError> {
    let n = nodes.len();
    if tape.shape(boxes) != [n, 4] {
        return Err(ModelError::Shape(format!("boxes {:?} for {n} nodes", tape.shape(boxes))));
    }
    let total = tape.value(masks).len();
    let m = if n == 0 { 1 } else { ((total / n) as f64).sqrt().round() as usize };
    if m * m * n != total {
        return Err(ModelError::Shape(format!("{total} mask values for {n} nodes")));
    }
    let op = SoftCompose::new(nodes, classes, height, width, m, beta);
    let out = op.forward(tape.value(boxes).data(), tape.value(masks).data());
    Ok(tape.custom(&[boxes, masks], out, Box::new(op)))
}

struct SoftCompose {
    classes: Vec<usize>,
    q: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    m: usize,
}

impl SoftCompose {
    fn new(nodes: &[ComposeNode], channels: usize, height: usize, width: usize, m: usize, beta: f64) -> Self {
        Self {
            classes: nodes.iter().map(|n| n.class).collect(),
            q: nodes.iter().map(|n| (-beta * n.depth_bin as f64).exp()).collect(),
            channels,
            height,
            width,
            m,
        }
    }

    fn samples(&self, boxes: &[f64], masks: &[f64], x: usize, y: usize) -> Vec<Option<Sample>> {
        let mm = self.m * self.m;
        let (u, v) = (pixel_center(x, self.width), pixel_center(y, self.height));
        (0..self.classes.len())
            .map(|i| sample(&masks[i * mm..(i + 1) * mm], self.m, &boxes[i * 4..i * 4 + 4], u, v))
            .collect()
    }

    fn forward(&self, boxes: &[f64], masks: &[f64]) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.channels * plane];
        for y in 0..self.height {
            for x in 0..self.width {
                let ss = self.samples(boxes, masks, x, y);
                let mut den = SOFT_COMPOSE_DELTA;
                for (i, s) in ss.iter().enumerate() {
                    if let Some(s) = s {
                        den += s.value * self.q[i];
                    }
                }
                let p = y * self.width + x;
                for (i, s) in ss.iter().enumerate() {
                    if let Some(s) = s {
                        out[self.classes[i] * plane + p] += s.value * s.value * self.q[i] / den;
                    }
                }
            }
        }
        Tensor::new(&[self.channels, self.height, self.width], out)
    }
}

impl CustomOp for SoftCompose {
    fn name(&self) -> &'static str {
        "soft_compose"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (boxes, masks) = (inputs[0], inputs[1]);
        let mm = self.m * self.m;
        let plane = self.height * self.width;
        let mut gb = vec![0.0; boxes.len()];
        let mut gm = vec![0.0; masks.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                let ss = self.samples(boxes.data(), masks.data(), x, y);
                let mut den = SOFT_COMPOSE_DELTA;
                let mut num = vec![0.0; self.channels];
                for (i, s) in ss.iter().enumerate() {
                    if let Some(s) = s {
                        den += s.value * self.q[i];
                        num[self.classes[i]] += s.value * s.value * self.q[i];
                    }
                }
                let g = |c: usize| grad.data()[c * plane + p];
                let weighted: f64 = (0..self.channels).map(|c| g(c) * num[c]).sum();
                for (i, s) in ss.iter().enumerate() {
                    let Some(s) = s else { continue };
                    let q = self.q[i];
                    let ga = g(self.classes[i]) * 2.0 * s.value * q / den - q * weighted / (den * den);
                    for k in 0..4 {
                        gb[i * 4 + k] += ga * s.d_box[k];
                    }
                    for &(idx, wt) in &s.taps {
                        gm[i * mm + idx] += ga * wt;
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(boxes.shape(), gb)),
            Some(Tensor::new(masks.shape(), gm)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn node(class: usize, z: usize) -> ComposeNode {
        ComposeNode {
            class,
            depth_bin: z,
            background: false,
        }
    }

    #[test]
    fn unit_box_full_mask_fills_its_channel() {
        let b = BoxPrediction {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
        };
        let m = MaskPrediction {
            size: 4,
            data: vec![1.0; 16],
        };
        let l = compose_layout(&[node(2, 0)], &[b], &[m], 3, 4, 6, ComposeMode::Hard).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(l.get(2, y, x), 1.0);
                assert_eq!(l.get(0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn empty_node_list_gives_empty_layout() {
        for mode in [ComposeMode::Hard, ComposeMode::Soft { beta: 1.0 }] {
            let l = compose_layout(&[], &[], &[], 4, 3, 5, mode).unwrap();
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let b = BoxPrediction::from_array(&[0.5; 4]);
        assert!(compose_layout(&[node(0, 0)], &[b, b], &[], 2, 2, 2, ComposeMode::Hard).is_err());
    }

    #[test]
    fn nearer_car_wins_overlap() {
        let full = MaskPrediction {
            size: 4,
            data: vec![1.0; 16],
        };
        let a = BoxPrediction::from_array(&[0.4, 0.5, 0.5, 0.5]);
        let b = BoxPrediction::from_array(&[0.6, 0.5, 0.5, 0.5]);
        // Class 0 at bin 2 (near), class 1 at bin 5 (far).
        let l = compose_layout(
            &[node(0, 2), node(1, 5)],
            &[a, b],
            &[full.clone(), full],
            2,
            8,
            8,
            ComposeMode::Hard,
        )
        .unwrap();
        let am = l.argmax();
        // Pixel column 4 (center 0.5625) lies in both boxes.
        assert_eq!(am[4 * 8 + 4], Some(0));
        assert_eq!(am[4 * 8 + 6], Some(1));
    }

    #[test]
    fn soft_values_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nodes: Vec<_> = (0..4).map(|i| node(i % 3, rng.random_range(0..8))).collect();
        let boxes: Vec<_> = (0..4)
            .map(|_| BoxPrediction::from_array(&[rng.random(), rng.random(), rng.random(), rng.random()]))
            .collect();
        let masks: Vec<_> = (0..4)
            .map(|_| MaskPrediction {
                size: 4,
                data: (0..16).map(|_| rng.random()).collect(),
            })
            .collect();
        let l = compose_layout(&nodes, &boxes, &masks, 3, 8, 8, ComposeMode::Soft { beta: 0.5 }).unwrap();
        assert!(l.all_in_unit_range());
    }

    #[test]
    fn soft_compose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nodes = vec![node(0, 1), node(1, 4), node(0, 6)];
        let boxes = Tensor::new(
            &[3, 4],
            vec![0.45, 0.5, 0.6, 0.7, 0.55, 0.45, 0.5, 0.6, 0.5, 0.52, 0.83, 0.77],
        );
        let masks = Tensor::uniform(&[3, 1, 4, 4], 0.05, 0.95, &mut rng);
        let weights = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        for which in 0..2 {
            let err = max_rel_error(&[boxes.clone(), masks.clone()], which, 1e-6, |t, v| {
                let out = soft_compose(t, v[0], v[1], &nodes, 2, 8, 8, 0.7).unwrap();
                let w = t.constant(weights.clone());
                let prod = t.mul(out, w);
                t.sum(prod)
            });
            assert!(err < 1e-3, "input {which}: rel err {err}");
        }
    }
}
