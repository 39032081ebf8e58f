//! The end-to-end desk experiment: sample a toy corpus, train the graph
//! processor on it, compose layouts, train the generator against rendered
//! toy targets, and evaluate both stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{layout_iou, FrechetProbe};
use super::render::{image_rgb8, layout_indices, layout_rgb8, tile_rgb8};
use super::toyworld::{oracle_segment, render_toy_target, toy_example, toy_semantic_map, ClassAppearance, ToyWorldConfig};
use crate::checkpoint::Checkpoint;
use crate::derive::{sample_corpus, DerivedGraph, SamplerConfig};
use crate::error::{ConfigError, ExperimentError, ModelError, Stage, TrainError};
use crate::generator::{train_generator, Generator, GeneratorConfig, GeneratorStepRecord};
use crate::graph::{parse_corpus, serialize_corpus, SceneEdge, SceneGraph, SceneNode, Schema};
use crate::layout::Layout;
use crate::nn::TrainConfig;
use crate::processor::{train_processor, Dims, LossWeights, Processor, ProcessorConfig, ProcessorStepRecord};
use crate::raster::{encode_rgb, write_bytes};
use crate::tensor::Tensor;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Where the processor's training graphs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sampler: SamplerConfig,
    pub size: usize,
    /// A committed corpus file (one graph document per line) used instead
    /// of sampling. Relative paths resolve against the config file.
    pub file: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig {
                seed: 7,
                depth_jitter: 7,
                ..Default::default()
            },
            size: 200,
            file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSet {
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutSource {
    /// Layouts composed by the trained processor (the full pipeline).
    Processor,
    /// Toy ground-truth class maps, bypassing the processor.
    GroundTruth,
}

/// Graph sets of the generator stage. Layout graphs feed the generator,
/// target graphs are only ever rendered into unpaired target images, and
/// evaluation graphs are held out from both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorDataConfig {
    /// Sampler settings; each set overrides the seed.
    pub sampler: SamplerConfig,
    pub layouts: GraphSet,
    pub targets: GraphSet,
    pub eval: GraphSet,
    pub layout_source: LayoutSource,
}

impl Default for GeneratorDataConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            layouts: GraphSet { seed: 11, count: 200 },
            targets: GraphSet { seed: 12, count: 200 },
            eval: GraphSet { seed: 13, count: 48 },
            layout_source: LayoutSource::Processor,
        }
    }
}

/// Every knob of a run. Stage seeds are offsets added to `seed`, so one
/// integer reseeds the whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Forbid any source of run-to-run variation. Every stage is already
    /// single-threaded; the flag is recorded so reruns can assert it.
    pub deterministic: bool,
    pub schema: Schema,
    pub corpus: CorpusConfig,
    pub toy_world: ToyWorldConfig,
    pub processor: ProcessorConfig,
    pub processor_loss: LossWeights,
    pub processor_training: TrainConfig,
    pub processor_init_seed: u64,
    /// Layout and image size `[H, W]`.
    pub resolution: [usize; 2],
    pub generator: GeneratorConfig,
    pub generator_training: TrainConfig,
    pub generator_init_seed: u64,
    pub generator_data: GeneratorDataConfig,
    pub probe_seed: u64,
    /// Images per sample grid.
    pub samples: usize,
    /// Points per loss curve in the metrics document (window means).
    pub curve_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            schema: Schema::default(),
            corpus: CorpusConfig::default(),
            toy_world: ToyWorldConfig::default(),
            processor: ProcessorConfig {
                layers: 1,
                ..Default::default()
            },
            processor_loss: LossWeights::default(),
            processor_training: TrainConfig {
                steps: 3000,
                batch: 8,
                final_lr_fraction: 0.05,
                ..Default::default()
            },
            processor_init_seed: 0,
            resolution: [64, 128],
            generator: GeneratorConfig::default(),
            generator_training: TrainConfig {
                steps: 2000,
                batch: 4,
                momentum: 0.5,
                final_lr_fraction: 0.05,
                ..Default::default()
            },
            generator_init_seed: 0,
            generator_data: GeneratorDataConfig::default(),
            probe_seed: 99,
            samples: 8,
            curve_points: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file; a relative corpus file is
    /// resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(f), Some(dir)) = (&cfg.corpus.file, path.parent()) {
            if f.is_relative() {
                cfg.corpus.file = Some(dir.join(f));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Inconsistent(m));
        self.processor.validate().map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        self.generator.validate().map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        for (name, t) in [("processor_training", &self.processor_training), ("generator_training", &self.generator_training)] {
            t.validate().map_err(|e| ConfigError::Inconsistent(format!("{name}: {e}")))?;
        }
        self.toy_world
            .resolve(&self.schema)
            .map_err(|e| ConfigError::Inconsistent(format!("toy_world: {e}")))?;
        let [h, w] = self.resolution;
        let f = self.generator.size_multiple().max(8);
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return bad(format!("resolution {h}×{w} must be positive multiples of {f}"));
        }
        let (lo_h, lo_w) = (h >> (crate::generator::ENCODER_BLOCKS - 1), w >> (crate::generator::ENCODER_BLOCKS - 1));
        if self.generator.nce.patches > lo_h * lo_w {
            return bad(format!(
                "{} contrastive patches exceed the {lo_h}×{lo_w} deepest feature map",
                self.generator.nce.patches
            ));
        }
        if self.corpus.size == 0 && self.corpus.file.is_none() {
            return bad("corpus is empty".into());
        }
        let d = &self.generator_data;
        if d.layouts.count == 0 || d.targets.count < 2 || d.eval.count < 2 {
            return bad("generator data needs layouts and at least two target and evaluation graphs".into());
        }
        if self.curve_points == 0 {
            return bad("curve_points must be positive".into());
        }
        Ok(())
    }

    /// A stage's seed: the run seed shifted by the stage's own offset.
    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }

    /// `base` with its seed replaced by the stage seed for `seed`.
    pub fn sampler(&self, base: &SamplerConfig, seed: u64) -> SamplerConfig {
        SamplerConfig {
            seed: self.stage_seed(seed),
            ..base.clone()
        }
    }

    pub fn processor_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(self.processor_training.seed),
            ..self.processor_training.clone()
        }
    }

    pub fn generator_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(self.generator_training.seed),
            ..self.generator_training.clone()
        }
    }

    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The processor's training graphs: the committed corpus file if one is
/// configured, otherwise a fresh sample.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Vec<SceneGraph>, ExperimentError> {
    let err = |e: String| ExperimentError::new(Stage::Sample, e);
    match &cfg.corpus.file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
            parse_corpus(&text, &cfg.schema).map_err(|e| err(format!("{}: {e}", path.display())))
        }
        None => sample_corpus(&cfg.sampler(&cfg.corpus.sampler, cfg.corpus.sampler.seed), &cfg.schema, cfg.corpus.size)
            .map_err(|e| ExperimentError::new(Stage::Sample, e)),
    }
}

pub fn toy_training_set(cfg: &ExperimentConfig, graphs: &[SceneGraph]) -> Vec<DerivedGraph> {
    graphs
        .iter()
        .map(|g| toy_example(g.clone(), &cfg.schema, cfg.processor.mask_size))
        .collect()
}

/// A fresh sample of `set.count` graphs from the generator-data sampler.
pub fn sample_set(cfg: &ExperimentConfig, set: GraphSet) -> Result<Vec<SceneGraph>, ExperimentError> {
    sample_corpus(&cfg.sampler(&cfg.generator_data.sampler, set.seed), &cfg.schema, set.count)
        .map_err(|e| ExperimentError::new(Stage::Sample, e))
}

/// Ground-truth class map of a graph at the configured resolution.
pub fn ground_truth_map(cfg: &ExperimentConfig, g: &SceneGraph) -> Vec<u16> {
    let [h, w] = cfg.resolution;
    toy_semantic_map(g, &cfg.schema, h, w)
}

/// Layout the generator sees for `g`.
pub fn input_layout(cfg: &ExperimentConfig, processor: &Processor, g: &SceneGraph) -> Result<Layout, ModelError> {
    let [h, w] = cfg.resolution;
    match cfg.generator_data.layout_source {
        LayoutSource::Processor => processor.layout(g, &cfg.schema, h, w),
        LayoutSource::GroundTruth => Ok(Layout::from_class_map(&ground_truth_map(cfg, g), cfg.schema.classes.len(), h, w)),
    }
}

/// Unpaired target-domain images, rendered from the target graph set.
pub fn target_images(cfg: &ExperimentConfig) -> Result<Vec<Tensor>, ExperimentError> {
    let app = appearance(cfg)?;
    let [h, w] = cfg.resolution;
    sample_set(cfg, cfg.generator_data.targets)?
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let seed = cfg.toy_world.noise_seed.wrapping_add(i as u64);
            render_toy_target(&ground_truth_map(cfg, g), h, w, &app, cfg.toy_world.noise_scale, seed)
                .map_err(|e| ExperimentError::new(Stage::Sample, e))
        })
        .collect()
}

fn appearance(cfg: &ExperimentConfig) -> Result<Vec<ClassAppearance>, ExperimentError> {
    cfg.toy_world
        .resolve(&cfg.schema)
        .map_err(|e| ExperimentError::new(Stage::Config, e))
}

/// The Fig. 5-style probe scene: sky, road, a building, the swept car
/// (node 3, at bin `z`) and a second car to its left.
pub fn depth_sweep_graph(schema: &Schema, z: usize) -> Result<SceneGraph, ModelError> {
    let class = |n: &str| {
        schema
            .classes
            .index_of(n)
            .ok_or_else(|| ModelError::Config(format!("vocabulary has no `{n}` class")))
    };
    let rel = |n: &str| {
        schema
            .relations
            .index_of(n)
            .ok_or_else(|| ModelError::Config(format!("vocabulary has no `{n}` relation")))
    };
    let cell = |r: usize, c: usize| r * schema.grid / 8 * schema.grid + c * schema.grid / 8;
    let last = schema.depth_bins - 1;
    let car = class("car")?;
    Ok(SceneGraph {
        nodes: vec![
            SceneNode::new(class("sky")?, cell(0, 3), last, schema),
            SceneNode::new(class("road")?, cell(7, 4), last, schema),
            SceneNode::new(class("building")?, cell(2, 1), last.saturating_sub(1), schema),
            SceneNode::new(car, cell(5, 4), z.min(last), schema),
            SceneNode::new(car, cell(5, 2), last / 2 + 1, schema),
        ],
        edges: vec![
            SceneEdge::new(4, rel("left_of")?, 3),
            SceneEdge::new(2, rel("above")?, 3),
        ],
        meta: Default::default(),
    })
}

/// Node of [`depth_sweep_graph`] whose depth bin is swept.
pub const DEPTH_SWEEP_NODE: usize = 3;

/// Predicted box areas of `node` as its depth bin runs over `0..Z`, and
/// whether they never grow with distance.
pub fn depth_sweep(
    processor: &Processor,
    schema: &Schema,
    g: &SceneGraph,
    node: usize,
) -> Result<DepthSweep, ModelError> {
    let n = g.nodes.get(node).ok_or_else(|| ModelError::Index(format!("node {node}")))?;
    let areas = (0..schema.depth_bins)
        .map(|z| {
            let mut h = g.clone();
            h.nodes[node] = SceneNode::new(n.class, n.cell(), z, schema);
            Ok(processor.predict(&h)?.0[node].area())
        })
        .collect::<Result<Vec<f64>, ModelError>>()?;
    let monotone = areas.windows(2).all(|w| w[0] >= w[1]);
    Ok(DepthSweep { areas, monotone })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSweep {
    /// Box area at bins `0, 1, …, Z−1`.
    pub areas: Vec<f64>,
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutIouReport {
    /// By class name; `null` where the class is absent from both maps.
    pub per_class: BTreeMap<String, Option<f64>>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Count {
    pub passed: usize,
    pub total: usize,
}

/// Window means of named loss series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCurves {
    /// Last step (1-based) of each window.
    pub steps: Vec<usize>,
    pub series: BTreeMap<String, Vec<f64>>,
}

impl LossCurves {
    pub fn from_rows(rows: &[Vec<(&'static str, f64)>], points: usize) -> Self {
        let n = rows.len();
        let points = points.clamp(1, n.max(1));
        let mut steps = Vec::new();
        let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for k in 0..points.min(n) {
            let (a, b) = (k * n / points, (k + 1) * n / points);
            steps.push(b);
            for (i, (name, _)) in rows[a].iter().enumerate() {
                let mean = rows[a..b].iter().map(|r| r[i].1).sum::<f64>() / (b - a) as f64;
                series.entry(name.to_string()).or_default().push(mean);
            }
        }
        Self { steps, series }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorMetrics {
    pub steps: usize,
    /// Mean IoU of predicted vs target boxes over every node of the
    /// training corpus.
    pub mean_box_iou: f64,
    /// Composed layouts vs ground truth on the evaluation graphs.
    pub layout_iou: LayoutIouReport,
    pub depth_sweep: DepthSweep,
    /// Cars of the training corpus whose depth sweep is monotone.
    pub corpus_sweeps: Count,
    pub losses: LossCurves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorEval {
    /// Fréchet probe distance between generated and target images.
    pub frechet: f64,
    /// Oracle-segmenter agreement with the input layouts (claimed pixels).
    pub oracle_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorMetrics {
    pub steps: usize,
    pub initial: GeneratorEval,
    #[serde(rename = "final")]
    pub trained: GeneratorEval,
    /// `1 − final/initial` Fréchet distance.
    pub frechet_reduction: f64,
    pub losses: LossCurves,
}

/// The machine-readable result of a run. Serialized with sorted keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDocument {
    pub schema_version: u32,
    pub config_sha256: String,
    pub processor: ProcessorMetrics,
    pub generator: GeneratorMetrics,
}

impl MetricsDocument {
    pub fn to_json(&self) -> String {
        // Round-tripping through `Value` sorts every object's keys.
        let v = serde_json::to_value(self).expect("metrics serialize");
        let mut s = serde_json::to_string_pretty(&v).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// Parses a metrics document and checks it against the schema: known
    /// fields only, matching version, and every value in its range.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != METRICS_SCHEMA_VERSION {
            return Err(format!("schema version {} (expected {METRICS_SCHEMA_VERSION})", self.schema_version));
        }
        if self.config_sha256.len() != 64 || !self.config_sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err("config_sha256 is not a sha256 hex digest".into());
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} = {v} outside [0, 1]"))
            }
        };
        let p = &self.processor;
        unit("processor.mean_box_iou", p.mean_box_iou)?;
        unit("processor.layout_iou.mean", p.layout_iou.mean)?;
        for (c, v) in &p.layout_iou.per_class {
            if let Some(v) = v {
                unit(&format!("processor.layout_iou.per_class.{c}"), *v)?;
            }
        }
        if p.depth_sweep.areas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err("depth sweep areas outside [0, 1]".into());
        }
        if p.corpus_sweeps.passed > p.corpus_sweeps.total {
            return Err("corpus_sweeps.passed exceeds total".into());
        }
        let g = &self.generator;
        for (name, e) in [("initial", &g.initial), ("final", &g.trained)] {
            if !(e.frechet >= 0.0 && e.frechet.is_finite()) {
                return Err(format!("generator.{name}.frechet = {} is not a finite distance", e.frechet));
            }
            unit(&format!("generator.{name}.oracle_accuracy"), e.oracle_accuracy)?;
        }
        for (name, c) in [("processor", &p.losses), ("generator", &g.losses)] {
            if c.series.values().any(|s| s.len() != c.steps.len()) {
                return Err(format!("{name} loss series differ in length from steps"));
            }
            if c.series.values().flatten().any(|v| !v.is_finite()) {
                return Err(format!("{name} loss curve has non-finite values"));
            }
        }
        Ok(())
    }
}

/// Named loss series of a processor training history, one row per step.
pub fn processor_rows(h: &[ProcessorStepRecord]) -> Vec<Vec<(&'static str, f64)>> {
    h.iter()
        .map(|r| {
            vec![
                ("total", r.total),
                ("box_mse", r.box_mse),
                ("mask_gan", r.mask_gan),
                ("mask_fm", r.mask_fm),
                ("discriminator", r.discriminator),
            ]
        })
        .collect()
}

/// Named loss series of a generator training history, one row per step.
pub fn generator_rows(h: &[GeneratorStepRecord]) -> Vec<Vec<(&'static str, f64)>> {
    h.iter()
        .map(|r| {
            vec![
                ("total", r.total),
                ("gan", r.gan),
                ("nce", r.nce),
                ("discriminator", r.discriminator),
                ("d_fake", r.d_fake),
            ]
        })
        .collect()
}

/// Processor quality on its training corpus and on held-out graphs.
pub fn evaluate_processor(
    cfg: &ExperimentConfig,
    processor: &Processor,
    corpus: &[DerivedGraph],
    eval_graphs: &[SceneGraph],
) -> Result<(f64, LayoutIouReport, DepthSweep, Count), ModelError> {
    let s = &cfg.schema;
    let (mut iou, mut n) = (0.0, 0usize);
    for ex in corpus {
        let (boxes, _) = processor.predict(&ex.graph)?;
        for (b, t) in boxes.iter().zip(&ex.targets) {
            iou += b.to_box().iou(&t.box2d);
            n += 1;
        }
    }
    let mean_box_iou = if n == 0 { 0.0 } else { iou / n as f64 };

    // Unclaimed predicted pixels count as an extra, never-correct class.
    let classes = s.classes.len();
    let [h, w] = cfg.resolution;
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for g in eval_graphs {
        pred.extend(layout_indices(&processor.layout(g, s, h, w)?));
        gt.extend(ground_truth_map(cfg, g));
    }
    let m = layout_iou(&pred, &gt, classes + 1)?;
    let per_class: BTreeMap<String, Option<f64>> = (0..classes)
        .map(|c| (s.classes.name_of(c).unwrap_or("?").to_string(), m.per_class[c]))
        .collect();
    let present: Vec<f64> = per_class.values().flatten().copied().collect();
    let mean = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };

    let sweep = depth_sweep(processor, s, &depth_sweep_graph(s, 0)?, DEPTH_SWEEP_NODE)?;
    let car = s.classes.index_of("car");
    let mut count = Count { passed: 0, total: 0 };
    for ex in corpus {
        for (i, node) in ex.graph.nodes.iter().enumerate() {
            if Some(node.class) == car {
                count.total += 1;
                if depth_sweep(processor, s, &ex.graph, i)?.monotone {
                    count.passed += 1;
                }
            }
        }
    }
    Ok((mean_box_iou, LayoutIouReport { per_class, mean }, sweep, count))
}

/// Fréchet probe distance of generated images to `targets`, and oracle
/// agreement of those images with their input layouts.
pub fn evaluate_generator(
    cfg: &ExperimentConfig,
    generator: &Generator,
    layouts: &[Layout],
    targets: &[Tensor],
) -> Result<(GeneratorEval, Vec<Tensor>), ExperimentError> {
    let eval_err = |e: ModelError| ExperimentError::new(Stage::Eval, e);
    let app = appearance(cfg)?;
    let images = layouts
        .iter()
        .map(|l| generator.generate(l))
        .collect::<Result<Vec<_>, _>>()
        .map_err(eval_err)?;
    let probe = FrechetProbe::new(cfg.probe_seed);
    let frechet = probe.distance(&images, targets).map_err(eval_err)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (img, l) in images.iter().zip(layouts) {
        let seg = oracle_segment(img, &app);
        for (p, c) in l.argmax().into_iter().enumerate() {
            if let Some(c) = c {
                total += 1;
                hit += usize::from(seg[p] as usize == c);
            }
        }
    }
    let oracle_accuracy = if total == 0 { 0.0 } else { hit as f64 / total as f64 };
    Ok((GeneratorEval { frechet, oracle_accuracy }, images))
}

/// Everything a run produced, in memory.
pub struct ExperimentOutcome {
    pub metrics: MetricsDocument,
    pub processor: Processor,
    pub generator: Generator,
    pub corpus: Vec<SceneGraph>,
    /// Wall-clock seconds spent in processor training.
    pub processor_seconds: f64,
    /// Wall-clock seconds spent in generator training.
    pub generator_seconds: f64,
}

/// Runs every stage and writes the artifacts under `out`:
///
/// ```text
/// config.json                     the effective configuration
/// corpus.jsonl                    processor training graphs
/// checkpoints/processor.ckpt      (+ processor-NNNNNN.ckpt if periodic)
/// checkpoints/generator.ckpt      (+ generator-NNNNNN.ckpt)
/// metrics.json                    MetricsDocument
/// report.md                       human-readable summary
/// samples/{layouts,generated,targets}.png
/// ```
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate().map_err(|e| ExperimentError::new(Stage::Config, e))?;
    let write_err = |e: std::io::Error| ExperimentError::new(Stage::Write, e);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(write_err)?;
    fs::create_dir_all(out.join("samples")).map_err(write_err)?;
    fs::write(out.join("config.json"), cfg.to_json()).map_err(write_err)?;

    log::info!("sampling corpus");
    let graphs = load_corpus(cfg)?;
    fs::write(out.join("corpus.jsonl"), serialize_corpus(&graphs, &cfg.schema)).map_err(write_err)?;
    let corpus = toy_training_set(cfg, &graphs);
    let layout_graphs = sample_set(cfg, cfg.generator_data.layouts)?;
    let eval_graphs = sample_set(cfg, cfg.generator_data.eval)?;
    let targets = target_images(cfg)?;

    log::info!("training processor");
    let s = &cfg.schema;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(cfg.processor_init_seed));
    let processor = Processor::new(cfg.processor.clone(), Dims::of(s), &mut rng)
        .map_err(|e| ExperimentError::new(Stage::TrainProcessor, e))?;
    let ptc = cfg.processor_train_config();
    let mut save_p = |step: usize, p: &Processor| -> Result<(), TrainError> {
        if step < ptc.steps {
            Checkpoint::of_processor(p, s, step as u64).save(&ckpt_dir.join(format!("processor-{step:06}.ckpt")))?;
        }
        Ok(())
    };
    let clock = std::time::Instant::now();
    let ptrain = train_processor(&corpus, processor, &ptc, &cfg.processor_loss, &mut save_p)
        .map_err(|e| ExperimentError::new(Stage::TrainProcessor, e))?;
    let processor_seconds = clock.elapsed().as_secs_f64();
    let pck = Checkpoint::of_processor(&ptrain.processor, s, ptc.steps as u64);
    pck.save(&ckpt_dir.join("processor.ckpt"))
        .map_err(|e| ExperimentError::new(Stage::Write, e))?;
    // Downstream stages use the weights exactly as they were saved.
    let (processor, _) = pck
        .rounded()
        .into_processor()
        .map_err(|e| ExperimentError::new(Stage::TrainProcessor, e))?;

    log::info!("composing layouts");
    let compose = |gs: &[SceneGraph]| {
        gs.iter()
            .map(|g| input_layout(cfg, &processor, g))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ExperimentError::new(Stage::Compose, e))
    };
    let layouts = compose(&layout_graphs)?;
    let eval_layouts = compose(&eval_graphs)?;

    log::info!("training generator");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(cfg.generator_init_seed));
    let generator = Generator::new(cfg.generator.clone(), s.classes.len(), &mut rng)
        .map_err(|e| ExperimentError::new(Stage::TrainGenerator, e))?;
    let eval_targets = &targets[..cfg.generator_data.eval.count.min(targets.len())];
    let (initial, _) = evaluate_generator(cfg, &generator, &eval_layouts, eval_targets)?;
    let gtc = cfg.generator_train_config();
    let mut save_g = |step: usize, g: &Generator| -> Result<(), TrainError> {
        if step < gtc.steps {
            Checkpoint::of_generator(g, s, step as u64).save(&ckpt_dir.join(format!("generator-{step:06}.ckpt")))?;
        }
        Ok(())
    };
    let clock = std::time::Instant::now();
    let gtrain = train_generator(&layouts, &targets, generator, &gtc, &mut save_g)
        .map_err(|e| ExperimentError::new(Stage::TrainGenerator, e))?;
    let generator_seconds = clock.elapsed().as_secs_f64();
    let gck = Checkpoint::of_generator(&gtrain.generator, s, gtc.steps as u64);
    gck.save(&ckpt_dir.join("generator.ckpt"))
        .map_err(|e| ExperimentError::new(Stage::Write, e))?;
    let (generator, _) = gck
        .rounded()
        .into_generator()
        .map_err(|e| ExperimentError::new(Stage::TrainGenerator, e))?;

    log::info!("evaluating");
    let (mean_box_iou, layout_iou, depth_sweep, corpus_sweeps) =
        evaluate_processor(cfg, &processor, &corpus, &eval_graphs).map_err(|e| ExperimentError::new(Stage::Eval, e))?;
    let (trained, images) = evaluate_generator(cfg, &generator, &eval_layouts, eval_targets)?;
    let metrics = MetricsDocument {
        schema_version: METRICS_SCHEMA_VERSION,
        config_sha256: cfg.sha256(),
        processor: ProcessorMetrics {
            steps: ptc.steps,
            mean_box_iou,
            layout_iou,
            depth_sweep,
            corpus_sweeps,
            losses: LossCurves::from_rows(&processor_rows(&ptrain.history), cfg.curve_points),
        },
        generator: GeneratorMetrics {
            steps: gtc.steps,
            frechet_reduction: if initial.frechet > 0.0 { 1.0 - trained.frechet / initial.frechet } else { 0.0 },
            initial,
            trained,
            losses: LossCurves::from_rows(&generator_rows(&gtrain.history), cfg.curve_points),
        },
    };
    metrics.validate().map_err(|e| ExperimentError::new(Stage::Eval, e))?;

    fs::write(out.join("metrics.json"), metrics.to_json()).map_err(write_err)?;
    fs::write(out.join("report.md"), report(cfg, &metrics)).map_err(write_err)?;
    let k = cfg.samples.min(eval_layouts.len());
    let [h, w] = cfg.resolution;
    let grids: [(&str, Vec<Vec<u8>>); 3] = [
        ("layouts", eval_layouts[..k].iter().map(|l| layout_rgb8(l, &s.classes)).collect()),
        ("generated", images[..k].iter().map(image_rgb8).collect()),
        ("targets", eval_targets[..k.min(eval_targets.len())].iter().map(image_rgb8).collect()),
    ];
    for (name, tiles) in grids {
        let (gw, gh, rgb) = tile_rgb8(&tiles, h, w, 4);
        let png = encode_rgb(gw, gh, &rgb).map_err(|e| ExperimentError::new(Stage::Write, e))?;
        write_bytes(&out.join("samples").join(format!("{name}.png")), &png)
            .map_err(|e| ExperimentError::new(Stage::Write, e))?;
    }
    Ok(ExperimentOutcome {
        metrics,
        processor,
        generator,
        corpus: graphs,
        processor_seconds,
        generator_seconds,
    })
}

/// Markdown summary of a metrics document.
pub fn report(cfg: &ExperimentConfig, m: &MetricsDocument) -> String {
    use std::fmt::Write;
    let p = &m.processor;
    let g = &m.generator;
    let mut r = String::new();
    let _ = writeln!(r, "# Experiment report\n");
    let _ = writeln!(r, "Config sha256 `{}`, seed {}, resolution {}×{}.\n", m.config_sha256, cfg.seed, cfg.resolution[0], cfg.resolution[1]);
    let _ = writeln!(r, "## Graph processor ({} steps)\n", p.steps);
    let _ = writeln!(r, "- mean box IoU on the training corpus: {:.4}", p.mean_box_iou);
    let _ = writeln!(r, "- mean layout IoU on held-out graphs: {:.4}", p.layout_iou.mean);
    let _ = writeln!(
        r,
        "- depth sweep of the probe car (bins 0..{}): {} ({})",
        p.depth_sweep.areas.len(),
        if p.depth_sweep.monotone { "monotone" } else { "NOT monotone" },
        p.depth_sweep.areas.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(", ")
    );
    let _ = writeln!(r, "- corpus cars with monotone sweeps: {}/{}\n", p.corpus_sweeps.passed, p.corpus_sweeps.total);
    let _ = writeln!(r, "| class | layout IoU |\n|---|---|");
    for (c, v) in &p.layout_iou.per_class {
        let _ = writeln!(r, "| {c} | {} |", v.map_or("–".to_string(), |v| format!("{v:.4}")));
    }
    let _ = writeln!(r, "\n## Generator ({} steps)\n", g.steps);
    let _ = writeln!(r, "| | Fréchet probe distance | oracle pixel accuracy |\n|---|---|---|");
    let _ = writeln!(r, "| initial | {:.5} | {:.4} |", g.initial.frechet, g.initial.oracle_accuracy);
    let _ = writeln!(r, "| final | {:.5} | {:.4} |", g.trained.frechet, g.trained.oracle_accuracy);
    let _ = writeln!(r, "\nFréchet distance reduced by {:.1}%.", 100.0 * g.frechet_reduction);
    r
}
