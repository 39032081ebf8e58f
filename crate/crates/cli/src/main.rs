//! `sg2scene`: corpus tools, training, generation, evaluation and serving.
//!
//! Every subcommand reads the same experiment configuration (`--config`,
//! JSON, unknown keys rejected); `--seed` shifts every stage seed and
//! `--deterministic` is recorded in the config. Outputs default to
//! subdirectories of the artifact root, which is `./artifacts` unless
//! `SG2SCENE_DATA_DIR` (or `--data-dir`) says otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sg2scene_core::checkpoint::Checkpoint;
use sg2scene_core::derive::{
    balanced_subsample, derive_graph, sample_corpus, DerivationConfig, DerivedGraph, DirectorySource, RecordSource,
};
use sg2scene_core::error::TrainError;
use sg2scene_core::generator::{train_generator, Generator};
use sg2scene_core::graph::{parse_corpus, parse_graph, serialize_corpus, SceneGraph, Schema};
use sg2scene_core::harness::experiment::{
    depth_sweep, depth_sweep_graph, evaluate_generator, evaluate_processor, generator_rows, ground_truth_map,
    input_layout, load_corpus, processor_rows, report, run_experiment, sample_set, target_images, toy_training_set,
    ExperimentConfig, LossCurves, DEPTH_SWEEP_NODE,
};
use sg2scene_core::harness::render::image_png;
use sg2scene_core::layout::{ClassRatio, Layout};
use sg2scene_core::processor::{train_processor, Dims, Processor};
use sg2scene_core::raster::{decode_rgb, read_gray, write_bytes, write_gray8, GrayImage};
use sg2scene_core::tensor::Tensor;
use sg2scene_service::{serve, ServiceState};

#[derive(Parser)]
#[command(name = "sg2scene", version, about = "Scene graphs to semantic layouts and images")]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply to absent fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Added to every stage seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Force the deterministic execution path.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Root for default output locations.
    #[arg(long, global = true, env = "SG2SCENE_DATA_DIR", default_value = "artifacts", value_name = "DIR")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive a graph corpus from a directory of annotation records.
    Derive {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Predicate thresholds and pruning (JSON); grid and depth bins
        /// must match the schema.
        #[arg(long, value_name = "FILE")]
        derivation: Option<PathBuf>,
    },
    /// Sample a procedural corpus with the configured sampler.
    Sample {
        /// Number of graphs (default: the configured corpus size).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Pick `k` graphs whose mean class ratio best matches a target ratio.
    Subsample {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// JSON object of class name to share, e.g. `{"road": 0.4, ...}`.
        #[arg(long, value_name = "FILE")]
        target: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train the graph processor.
    TrainProcessor {
        /// Graph corpus file (supervised by the toy world) or a directory
        /// of annotation records (supervised by their boxes and masks).
        /// Defaults to the configured corpus.
        #[arg(long, value_name = "FILE|DIR")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train the layout-to-image generator on unpaired targets.
    TrainGenerator {
        /// Graph corpus file (composed with `--processor`, or toy ground
        /// truth without it) or a directory of 8-bit class-index PNGs.
        #[arg(long, value_name = "FILE|DIR")]
        layouts: PathBuf,
        /// Directory of RGB PNG target images at the configured resolution.
        #[arg(long, value_name = "DIR")]
        target: PathBuf,
        #[arg(long, value_name = "CKPT")]
        processor: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compose a layout for one graph and render it to an RGB image.
    Generate {
        #[arg(long, value_name = "FILE")]
        graph: PathBuf,
        #[arg(long, value_name = "CKPT")]
        processor: PathBuf,
        #[arg(long, value_name = "CKPT")]
        generator: PathBuf,
        #[arg(long, value_name = "IMAGE")]
        out: PathBuf,
        /// Also write the layout as an 8-bit class-index PNG.
        #[arg(long, value_name = "IMAGE")]
        layout_out: Option<PathBuf>,
    },
    /// Evaluate checkpoints with the experiment metrics.
    Eval {
        #[arg(long, value_name = "CKPT")]
        processor: PathBuf,
        #[arg(long, value_name = "CKPT")]
        generator: Option<PathBuf>,
        /// Corpus for box IoU and the depth sweeps (default: configured).
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        /// Write the JSON result here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run the whole experiment: sample, train, compose, train, evaluate.
    Run {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, value_name = "CKPT")]
        processor: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        generator: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Static editor build to expose under `/app`.
        #[arg(long, value_name = "DIR")]
        app: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let explicit_config = cli.config.is_some();
    let cfg = load_config(&cli)?;
    let root = cli.data_dir.clone();
    let out_or = |out: Option<PathBuf>, name: &str| out.unwrap_or_else(|| root.join(name));
    match cli.command {
        Command::Derive { input, out, derivation } => derive(&cfg, &input, &out, derivation.as_deref()),
        Command::Sample { n, out } => {
            let sampler = cfg.sampler(&cfg.corpus.sampler, cfg.corpus.sampler.seed);
            let graphs = sample_corpus(&sampler, &cfg.schema, n.unwrap_or(cfg.corpus.size))?;
            write_corpus(&out, &graphs, &cfg.schema)
        }
        Command::Subsample { input, target, k, out } => subsample(&cfg, &input, &target, k, &out),
        Command::TrainProcessor { corpus, out } => {
            train_processor_cmd(&cfg, corpus.as_deref(), &out_or(out, "processor"))
        }
        Command::TrainGenerator { layouts, target, processor, out } => {
            train_generator_cmd(&cfg, &layouts, &target, processor.as_deref(), &out_or(out, "generator"))
        }
        Command::Generate { graph, processor, generator, out, layout_out } => generate(
            explicit_config.then_some(&cfg),
            &graph,
            &processor,
            &generator,
            &out,
            layout_out.as_deref(),
        ),
        Command::Eval { processor, generator, corpus, out } => {
            eval(&cfg, &processor, generator.as_deref(), corpus.as_deref(), out.as_deref())
        }
        Command::Run { out } => {
            let out = out_or(out, "run");
            let outcome = run_experiment(&cfg, &out)?;
            print!("{}", report(&cfg, &outcome.metrics));
            log::info!("artifacts written to {}", out.display());
            Ok(())
        }
        Command::Serve { processor, generator, port, host, app } => {
            let mut state = ServiceState::load(processor.as_deref(), generator.as_deref(), explicit_config.then_some(cfg))?;
            if let Some(dir) = app {
                ensure!(dir.is_dir(), "{}: not a directory", dir.display());
                state = state.with_app_dir(dir);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, &host, port))?;
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("{}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_corpus(out: &Path, graphs: &[SceneGraph], schema: &Schema) -> Result<()> {
    create_parent(out)?;
    fs::write(out, serialize_corpus(graphs, schema)).with_context(|| format!("{}", out.display()))?;
    log::info!("wrote {} graphs to {}", graphs.len(), out.display());
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
    }
    Ok(())
}

fn read_corpus(path: &Path, schema: &Schema) -> Result<Vec<SceneGraph>> {
    let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    parse_corpus(&text, schema).with_context(|| format!("{}", path.display()))
}

fn derivation_config(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<DerivationConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{}", p.display()))
        }
        None => Ok(DerivationConfig {
            grid: cfg.schema.grid,
            depth_bins: cfg.schema.depth_bins,
            mask_size: cfg.processor.mask_size,
            ..DerivationConfig::default()
        }),
    }
}

fn derive_records(cfg: &ExperimentConfig, dir: &Path, derivation: Option<&Path>) -> Result<Vec<DerivedGraph>> {
    let dcfg = derivation_config(cfg, derivation)?;
    let source = DirectorySource::open(dir)?;
    ensure!(source.len() > 0, "{}: no annotation records found", dir.display());
    (0..source.len())
        .map(|i| {
            let rec = source.load(i, &cfg.schema)?;
            derive_graph(&rec, &dcfg, &cfg.schema).with_context(|| format!("{}", source.paths()[i].display()))
        })
        .collect()
}

fn derive(cfg: &ExperimentConfig, input: &Path, out: &Path, derivation: Option<&Path>) -> Result<()> {
    let derived = derive_records(cfg, input, derivation)?;
    let graphs: Vec<SceneGraph> = derived.into_iter().map(|d| d.graph).collect();
    write_corpus(out, &graphs, &cfg.schema)
}

fn subsample(cfg: &ExperimentConfig, input: &Path, target: &Path, k: usize, out: &Path) -> Result<()> {
    let s = &cfg.schema;
    let graphs = read_corpus(input, s)?;
    let text = fs::read_to_string(target).with_context(|| format!("{}", target.display()))?;
    let shares: BTreeMap<String, f64> =
        serde_json::from_str(&text).with_context(|| format!("{}: expected an object of class shares", target.display()))?;
    let mut q = vec![0.0; s.classes.len()];
    for (name, v) in shares {
        let c = s.classes.index_of(&name).with_context(|| format!("{}: unknown class `{name}`", target.display()))?;
        ensure!(v.is_finite() && v >= 0.0, "{}: share of `{name}` must be non-negative", target.display());
        q[c] += v;
    }
    ensure!(q.iter().sum::<f64>() > 0.0, "{}: target ratio has no mass", target.display());
    let target = ClassRatio::from_counts(&q);

    // A graph's class ratio is measured on its toy-world rendering.
    let ratios: Vec<ClassRatio> = graphs
        .iter()
        .map(|g| {
            let mut counts = vec![0.0; s.classes.len()];
            for c in ground_truth_map(cfg, g) {
                if let Some(n) = counts.get_mut(c as usize) {
                    *n += 1.0;
                }
            }
            ClassRatio::from_counts(&counts)
        })
        .collect();
    let picked = balanced_subsample(&ratios, &target, k)?;
    let chosen: Vec<SceneGraph> = picked.iter().map(|&i| graphs[i].clone()).collect();
    write_corpus(out, &chosen, s)
}

fn train_processor_cmd(cfg: &ExperimentConfig, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let s = &cfg.schema;
    let examples = match corpus {
        Some(p) if p.is_dir() => derive_records(cfg, p, None)?,
        Some(p) => toy_training_set(cfg, &read_corpus(p, s)?),
        None => toy_training_set(cfg, &load_corpus(cfg)?),
    };
    fs::create_dir_all(out).with_context(|| format!("{}", out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(cfg.processor_init_seed));
    let processor = Processor::new(cfg.processor.clone(), Dims::of(s), &mut rng)?;
    let tc = cfg.processor_train_config();
    log::info!("training processor on {} graphs for {} steps", examples.len(), tc.steps);
    let mut save = |step: usize, p: &Processor| -> Result<(), TrainError> {
        if step < tc.steps {
            Checkpoint::of_processor(p, s, step as u64).save(&out.join(format!("processor-{step:06}.ckpt")))?;
        }
        Ok(())
    };
    let trained = train_processor(&examples, processor, &tc, &cfg.processor_loss, &mut save)?;
    let path = out.join("processor.ckpt");
    Checkpoint::of_processor(&trained.processor, s, tc.steps as u64).save(&path)?;
    let curves = LossCurves::from_rows(&processor_rows(&trained.history), cfg.curve_points);
    fs::write(out.join("losses.json"), serde_json::to_string_pretty(&curves)?)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("{}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    files.sort();
    ensure!(!files.is_empty(), "{}: no PNG files", dir.display());
    Ok(files)
}

fn load_processor(path: &Path, schema: Option<&Schema>) -> Result<(Processor, Schema)> {
    let (p, s) = Checkpoint::load(path)
        .and_then(|c| c.into_processor())
        .with_context(|| format!("{}", path.display()))?;
    if let Some(want) = schema {
        ensure!(&s == want, "{}: checkpoint schema differs from the configuration", path.display());
    }
    Ok((p, s))
}

fn train_generator_cmd(
    cfg: &ExperimentConfig,
    layouts: &Path,
    target: &Path,
    processor: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let s = &cfg.schema;
    let [h, w] = cfg.resolution;
    let classes = s.classes.len();
    let layouts: Vec<Layout> = if layouts.is_dir() {
        sorted_pngs(layouts)?
            .iter()
            .map(|p| {
                let img = read_gray(p).with_context(|| format!("{}", p.display()))?;
                ensure!((img.height, img.width) == (h, w), "{}: expected {h}×{w}", p.display());
                Ok(Layout::from_class_map(&img.data, classes, h, w))
            })
            .collect::<Result<_>>()?
    } else {
        let graphs = read_corpus(layouts, s)?;
        match processor {
            Some(p) => {
                let (proc_, _) = load_processor(p, Some(s))?;
                graphs.iter().map(|g| Ok(proc_.layout(g, s, h, w)?)).collect::<Result<_>>()?
            }
            None => {
                log::info!("no --processor given: using toy-world ground-truth layouts");
                graphs
                    .iter()
                    .map(|g| Layout::from_class_map(&ground_truth_map(cfg, g), classes, h, w))
                    .collect()
            }
        }
    };
    let targets: Vec<Tensor> = sorted_pngs(target)?
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("{}", p.display()))?;
            let (iw, ih, rgb) = decode_rgb(&bytes).with_context(|| format!("{}", p.display()))?;
            ensure!((ih, iw) == (h, w), "{}: expected {h}×{w}, got {ih}×{iw}", p.display());
            Ok(rgb_tensor(&rgb, h, w))
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(out).with_context(|| format!("{}", out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(cfg.generator_init_seed));
    let generator = Generator::new(cfg.generator.clone(), classes, &mut rng)?;
    let tc = cfg.generator_train_config();
    log::info!(
        "training generator on {} layouts and {} targets for {} steps",
        layouts.len(),
        targets.len(),
        tc.steps
    );
    let mut save = |step: usize, g: &Generator| -> Result<(), TrainError> {
        if step < tc.steps {
            Checkpoint::of_generator(g, s, step as u64).save(&out.join(format!("generator-{step:06}.ckpt")))?;
        }
        Ok(())
    };
    let trained = train_generator(&layouts, &targets, generator, &tc, &mut save)?;
    let path = out.join("generator.ckpt");
    Checkpoint::of_generator(&trained.generator, s, tc.steps as u64).save(&path)?;
    let curves = LossCurves::from_rows(&generator_rows(&trained.history), cfg.curve_points);
    fs::write(out.join("losses.json"), serde_json::to_string_pretty(&curves)?)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// `[3, H, W]` tensor in `[0, 1]` from interleaved 8-bit RGB.
fn rgb_tensor(rgb: &[u8], h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = rgb[3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn generate(
    cfg: Option<&ExperimentConfig>,
    graph: &Path,
    processor: &Path,
    generator: &Path,
    out: &Path,
    layout_out: Option<&Path>,
) -> Result<()> {
    let (proc_, schema) = load_processor(processor, cfg.map(|c| &c.schema))?;
    let (gen, gschema) = Checkpoint::load(generator)
        .and_then(|c| c.into_generator())
        .with_context(|| format!("{}", generator.display()))?;
    ensure!(gschema == schema, "processor and generator were trained with different schemas");
    let text = fs::read_to_string(graph).with_context(|| format!("{}", graph.display()))?;
    let g = parse_graph(&text, &schema).with_context(|| format!("{}", graph.display()))?;
    let [h, w] = cfg.map_or(sg2scene_service::DEFAULT_RESOLUTION, |c| c.resolution);
    let layout = proc_.layout(&g, &schema, h, w)?;
    let image = gen.generate(&layout)?;
    create_parent(out)?;
    write_bytes(out, &image_png(&image)?)?;
    if let Some(p) = layout_out {
        create_parent(p)?;
        let none = layout.classes() as u16;
        let data = layout.argmax().into_iter().map(|c| c.map_or(none, |c| c as u16)).collect();
        write_gray8(p, &GrayImage { width: w, height: h, data })?;
    }
    log::info!("wrote {}", out.display());
    Ok(())
}

fn eval(
    cfg: &ExperimentConfig,
    processor: &Path,
    generator: Option<&Path>,
    corpus: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let s = &cfg.schema;
    let (proc_, _) = load_processor(processor, Some(s))?;
    let graphs = match corpus {
        Some(p) => read_corpus(p, s)?,
        None => load_corpus(cfg)?,
    };
    let examples = toy_training_set(cfg, &graphs);
    let eval_graphs = sample_set(cfg, cfg.generator_data.eval)?;
    let (mean_box_iou, layout_iou, sweep, corpus_sweeps) = evaluate_processor(cfg, &proc_, &examples, &eval_graphs)?;
    let mut doc = serde_json::json!({
        "processor": {
            "mean_box_iou": mean_box_iou,
            "layout_iou": layout_iou,
            "depth_sweep": sweep,
            "corpus_sweeps": corpus_sweeps,
        }
    });
    if let Some(gp) = generator {
        let (gen, gs) = Checkpoint::load(gp)
            .and_then(|c| c.into_generator())
            .with_context(|| format!("{}", gp.display()))?;
        ensure!(&gs == s, "{}: checkpoint schema differs from the configuration", gp.display());
        let layouts = eval_graphs
            .iter()
            .map(|g| input_layout(cfg, &proc_, g))
            .collect::<Result<Vec<_>, _>>()?;
        let targets = target_images(cfg)?;
        let n = cfg.generator_data.eval.count.min(targets.len());
        let (metrics, _) = evaluate_generator(cfg, &gen, &layouts, &targets[..n])?;
        doc["generator"] = serde_json::to_value(metrics)?;
    }
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match out {
        Some(p) => {
            create_parent(p)?;
            fs::write(p, text).with_context(|| format!("{}", p.display()))?;
        }
        None => print!("{text}"),
    }
    if !sweep_is_monotone(&proc_, s)? {
        log::warn!("probe car's box area is not monotone in its depth bin");
    }
    Ok(())
}

fn sweep_is_monotone(p: &Processor, s: &Schema) -> Result<bool> {
    let g = depth_sweep_graph(s, 0)?;
    Ok(depth_sweep(p, s, &g, DEPTH_SWEEP_NODE)?.monotone)
}
