//! The graph processor: node embeddings, triple-update graph convolution,
//! box and mask regression heads, layout composition and training.

mod compose;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::derive::Box2d;
use crate::error::ModelError;
use crate::graph::{SceneGraph, Schema};
use crate::layout::Layout;
use crate::nn::{conv, conv_transpose, init_conv, init_conv_transpose, init_linear, linear, mlp2};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

pub use compose::{
    compose_layout, compose_nodes, soft_compose, warp_mask, ComposeMode, ComposeNode,
    DEFAULT_NEARNESS_BETA, SOFT_COMPOSE_DELTA,
};
pub use train::{
    mask_discriminator, processor_loss, train_processor, LossWeights, ProcessorLoss,
    ProcessorStepRecord, ProcessorTraining, TrainConfig, TrainingExample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessorConfig {
    pub class_dim: usize,
    pub location_dim: usize,
    pub depth_dim: usize,
    pub relation_dim: usize,
    /// Node vector width `d_h`.
    pub hidden: usize,
    /// Number of graph-convolution layers `K`.
    pub layers: usize,
    /// Side `M` of predicted masks; must be `4·2^k`.
    pub mask_size: usize,
    /// Channels of the mask head's upsampling stack.
    pub mask_channels: usize,
    /// Feed the depth-bin embedding into node vectors.
    pub use_depth_attribute: bool,
    /// Pass messages along relation edges.
    pub use_relations: bool,
    /// Channel widths of the mask discriminator's downsampling blocks.
    pub mask_disc_widths: Vec<usize>,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        Self {
            class_dim: 32,
            location_dim: 32,
            depth_dim: 16,
            relation_dim: 16,
            hidden: 64,
            layers: 3,
            mask_size: 32,
            mask_channels: 16,
            use_depth_attribute: true,
            use_relations: true,
            mask_disc_widths: vec![16, 32],
        }
    }
}

impl ProcessorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden == 0 || self.class_dim == 0 || self.location_dim == 0 {
            return bad("embedding widths must be positive".into());
        }
        if self.depth_dim == 0 || self.relation_dim == 0 || self.mask_channels == 0 {
            return bad("embedding widths must be positive".into());
        }
        if self.mask_size < 4 || self.mask_size % 4 != 0 || !(self.mask_size / 4).is_power_of_two() {
            return bad(format!("mask_size {} is not 4·2^k", self.mask_size));
        }
        if self.mask_size % (1 << self.mask_disc_widths.len()) != 0 {
            return bad("mask_size not divisible by the mask discriminator's stride".into());
        }
        Ok(())
    }

    fn upsampling_stages(&self) -> usize {
        (self.mask_size / 4).trailing_zeros() as usize
    }
}

/// Vocabulary sizes a processor is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub classes: usize,
    pub cells: usize,
    pub depth_bins: usize,
    pub relations: usize,
}

impl Dims {
    pub fn of(schema: &Schema) -> Self {
        Self {
            classes: schema.classes.len(),
            cells: schema.cells(),
            depth_bins: schema.depth_bins,
            relations: schema.relations.len(),
        }
    }
}

/// Box in center/size form, each component in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxPrediction {
    pub fn from_array(v: &[f64]) -> Self {
        Self {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }

    pub fn from_box(b: &Box2d) -> Self {
        let (cx, cy) = b.center();
        Self {
            cx,
            cy,
            w: b.x1 - b.x0,
            h: b.y1 - b.y0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Corners, clamped to the unit square.
    pub fn to_box(self) -> Box2d {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Box2d::new(
            c(self.cx - self.w / 2.0),
            c(self.cy - self.h / 2.0),
            c(self.cx + self.w / 2.0),
            c(self.cy + self.h / 2.0),
        )
    }

    pub fn area(self) -> f64 {
        self.to_box().area()
    }
}

/// Square mask with values in (0, 1), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPrediction {
    pub size: usize,
    pub data: Vec<f64>,
}

/// Nodes and edges of several graphs flattened into one disjoint graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphBatch {
    pub classes: Vec<usize>,
    pub cells: Vec<usize>,
    pub depths: Vec<usize>,
    /// `(subject, relation, object)` with batch-global node indices.
    pub edges: Vec<(usize, usize, usize)>,
    /// Node range of each graph.
    pub ranges: Vec<std::ops::Range<usize>>,
}

impl GraphBatch {
    pub fn new<'a>(graphs: impl IntoIterator<Item = &'a SceneGraph>) -> Self {
        let mut b = GraphBatch::default();
        for g in graphs {
            let off = b.classes.len();
            for n in &g.nodes {
                b.classes.push(n.class);
                b.cells.push(n.cell());
                b.depths.push(n.depth_bin());
            }
            b.edges.extend(
                g.edges
                    .iter()
                    .map(|e| (e.subject + off, e.relation, e.object + off)),
            );
            b.ranges.push(off..b.classes.len());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn check(&self, dims: &Dims) -> Result<(), ModelError> {
        let oob = |what: &str, i: usize, v: usize, n: usize| {
            Err(ModelError::Index(format!("node {i}: {what} {v} outside 0..{n}")))
        };
        for i in 0..self.len() {
            if self.classes[i] >= dims.classes {
                return oob("class", i, self.classes[i], dims.classes);
            }
            if self.cells[i] >= dims.cells {
                return oob("cell", i, self.cells[i], dims.cells);
            }
            if self.depths[i] >= dims.depth_bins {
                return oob("depth bin", i, self.depths[i], dims.depth_bins);
            }
        }
        for (k, &(s, r, o)) in self.edges.iter().enumerate() {
            if s >= self.len() || o >= self.len() || r >= dims.relations {
                return Err(ModelError::Index(format!("edge {k} ({s}, {r}, {o}) out of range")));
            }
        }
        Ok(())
    }
}

/// Tape handles of one processor forward pass.
pub struct ProcessorOutput {
    pub embeddings: Var,
    /// `[n, 4]` in (cx, cy, w, h) form.
    pub boxes: Var,
    /// `[n, 1, M, M]`.
    pub masks: Var,
}

/// Processor weights plus the configuration they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct Processor {
    pub config: ProcessorConfig,
    pub dims: Dims,
    pub params: ParamStore,
}

impl Processor {
    pub fn new<R: Rng + ?Sized>(
        config: ProcessorConfig,
        dims: Dims,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config, &dims, rng);
        Ok(Self {
            config,
            dims,
            params,
        })
    }

    /// Wraps loaded weights after checking names and shapes.
    pub fn from_params(
        config: ProcessorConfig,
        dims: Dims,
        params: ParamStore,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        init_params(&config, &dims, &mut rng).check_compatible(&params)?;
        Ok(Self {
            config,
            dims,
            params,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &GraphBatch,
    ) -> Result<ProcessorOutput, ModelError> {
        batch.check(&self.dims)?;
        let v = embed_nodes(tape, p, &self.config, batch);
        let rel = p.var("relation.table");
        let edges: &[(usize, usize, usize)] = if self.config.use_relations {
            &batch.edges
        } else {
            &[]
        };
        let mut v = v;
        for k in 0..self.config.layers {
            v = graph_conv_layer(tape, p, &format!("gconv{k}"), v, edges, rel);
        }
        let boxes = predict_box(tape, p, v);
        let masks = predict_mask(tape, p, &self.config, v);
        Ok(ProcessorOutput {
            embeddings: v,
            boxes,
            masks,
        })
    }

    /// Boxes and masks for every node of `g`.
    pub fn predict(&self, g: &SceneGraph) -> Result<(Vec<BoxPrediction>, Vec<MaskPrediction>), ModelError> {
        let batch = GraphBatch::new([g]);
        if batch.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, &batch)?;
        Ok(split_outputs(tape.value(out.boxes), tape.value(out.masks)))
    }

    /// Hard-composed layout of `g` at `height × width`.
    pub fn layout(&self, g: &SceneGraph, schema: &Schema, height: usize, width: usize) -> Result<Layout, ModelError> {
        let (boxes, masks) = self.predict(g)?;
        compose_layout(
            &compose_nodes(g, schema),
            &boxes,
            &masks,
            schema.classes.len(),
            height,
            width,
            ComposeMode::Hard,
        )
    }
}

/// Splits `[n, 4]` boxes and `[n, 1, M, M]` masks into per-node values.
pub fn split_outputs(boxes: &Tensor, masks: &Tensor) -> (Vec<BoxPrediction>, Vec<MaskPrediction>) {
    let n = boxes.dim(0);
    let m = masks.dim(masks.shape().len() - 1);
    let b = (0..n).map(|i| BoxPrediction::from_array(boxes.row(i))).collect();
    let k = (0..n)
        .map(|i| MaskPrediction {
            size: m,
            data: masks.data()[i * m * m..(i + 1) * m * m].to_vec(),
        })
        .collect();
    (b, k)
}

fn init_params<R: Rng + ?Sized>(cfg: &ProcessorConfig, dims: &Dims, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("class.table", Tensor::randn(&[dims.classes, cfg.class_dim], 1.0, rng));
    p.insert("location.table", Tensor::randn(&[dims.cells, cfg.location_dim], 1.0, rng));
    p.insert("depth.table", Tensor::randn(&[dims.depth_bins, cfg.depth_dim], 1.0, rng));
    p.insert("relation.table", Tensor::randn(&[dims.relations, cfg.relation_dim], 1.0, rng));
    let cat = cfg.class_dim + cfg.location_dim + cfg.depth_dim;
    p.insert(
        "embed.proj",
        Tensor::randn(&[cat, cfg.hidden], (1.0 / cat as f64).sqrt(), rng),
    );
    let d = cfg.hidden;
    for k in 0..cfg.layers {
        init_linear(&mut p, &format!("gconv{k}.triple.0"), 2 * d + cfg.relation_dim, d, rng);
        init_linear(&mut p, &format!("gconv{k}.triple.1"), d, 2 * d, rng);
        init_linear(&mut p, &format!("gconv{k}.node.0"), d, d, rng);
        init_linear(&mut p, &format!("gconv{k}.node.1"), d, d, rng);
        init_linear(&mut p, &format!("gconv{k}.self.0"), d, d, rng);
        init_linear(&mut p, &format!("gconv{k}.self.1"), d, d, rng);
    }
    init_linear(&mut p, "box.0", d, d, rng);
    init_linear(&mut p, "box.1", d, 4, rng);
    let s = cfg.mask_channels;
    init_linear(&mut p, "mask.seed", d, s * 16, rng);
    for k in 0..cfg.upsampling_stages() {
        init_conv_transpose(&mut p, &format!("mask.up{k}"), s, s, 4, rng);
    }
    init_conv(&mut p, "mask.out", s, 1, 1, rng);
    p
}

/// Initial node vectors: class, location and depth embeddings concatenated
/// and projected (without bias) to the hidden width.
pub fn embed_nodes(tape: &mut Tape, p: &Bound, cfg: &ProcessorConfig, batch: &GraphBatch) -> Var {
    let c = tape.gather_rows(p.var("class.table"), &batch.classes);
    let l = tape.gather_rows(p.var("location.table"), &batch.cells);
    let z = tape.gather_rows(p.var("depth.table"), &batch.depths);
    let z = if cfg.use_depth_attribute {
        z
    } else {
        tape.scale(z, 0.0)
    };
    let cat = tape.concat(&[c, l, z], 1);
    tape.matmul(cat, p.var("embed.proj"))
}

/// One triple-update layer.
///
/// Every edge `(i, r, j)` maps `[v_i, rel_r, v_j]` through a shared
/// two-layer perceptron to candidates `(s_i, o_j)`. A node with at least
/// one incident edge becomes `node_mlp(mean of its candidates)`; an
/// isolated node becomes `self_mlp(v_i)`.
pub fn graph_conv_layer(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    v: Var,
    edges: &[(usize, usize, usize)],
    relation_table: Var,
) -> Var {
    let n = tape.shape(v)[0];
    let d = tape.shape(v)[1];
    let isolated = mlp2(tape, p, &format!("{prefix}.self"), v);
    if edges.is_empty() {
        return isolated;
    }
    let subj: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let rels: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let obj: Vec<usize> = edges.iter().map(|e| e.2).collect();
    let vs = tape.gather_rows(v, &subj);
    let vr = tape.gather_rows(relation_table, &rels);
    let vo = tape.gather_rows(v, &obj);
    let x = tape.concat(&[vs, vr, vo], 1);
    let cand = mlp2(tape, p, &format!("{prefix}.triple"), x);
    let s = tape.slice(cand, 1, 0, d);
    let o = tape.slice(cand, 1, d, d);

    let e = edges.len();
    let mut count = vec![0usize; n];
    for &(a, _, b) in edges {
        count[a] += 1;
        count[b] += 1;
    }
    let mut ps = vec![0.0; n * e];
    let mut po = vec![0.0; n * e];
    for (k, &(a, _, b)) in edges.iter().enumerate() {
        ps[a * e + k] = 1.0 / count[a] as f64;
        po[b * e + k] = 1.0 / count[b] as f64;
    }
    let ps = tape.constant(Tensor::new(&[n, e], ps));
    let po = tape.constant(Tensor::new(&[n, e], po));
    let pooled_s = tape.matmul(ps, s);
    let pooled_o = tape.matmul(po, o);
    let pooled = tape.add(pooled_s, pooled_o);
    let connected = mlp2(tape, p, &format!("{prefix}.node"), pooled);

    let mut sel = vec![0.0; n * d];
    for (i, &c) in count.iter().enumerate() {
        if c > 0 {
            sel[i * d..(i + 1) * d].fill(1.0);
        }
    }
    let keep_iso: Vec<f64> = sel.iter().map(|v| 1.0 - v).collect();
    let sel = tape.constant(Tensor::new(&[n, d], sel));
    let keep_iso = tape.constant(Tensor::new(&[n, d], keep_iso));
    let a = tape.mul(connected, sel);
    let b = tape.mul(isolated, keep_iso);
    tape.add(a, b)
}

/// Box head: two-layer perceptron and a sigmoid, `[n, d] -> [n, 4]`.
pub fn predict_box(tape: &mut Tape, p: &Bound, v: Var) -> Var {
    let raw = mlp2(tape, p, "box", v);
    tape.sigmoid(raw)
}

/// Mask head: linear seed to `channels×4×4`, transposed-convolution
/// doublings up to `M×M`, a 1×1 convolution and a sigmoid.
pub fn predict_mask(tape: &mut Tape, p: &Bound, cfg: &ProcessorConfig, v: Var) -> Var {
    let n = tape.shape(v)[0];
    let seed = linear(tape, p, "mask.seed", v);
    let seed = tape.reshape(seed, &[n, cfg.mask_channels, 4, 4]);
    let mut h = tape.relu(seed);
    for k in 0..cfg.upsampling_stages() {
        let u = conv_transpose(tape, p, &format!("mask.up{k}"), h, 2, 1);
        h = tape.relu(u);
    }
    let out = conv(tape, p, "mask.out", h, 1, 0);
    tape.sigmoid(out)
}
