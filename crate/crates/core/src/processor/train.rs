use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{feature_matching_loss, feature_matching_loss_per_feature, gan_loss, GanVariant, PatchDiscriminator};
use crate::autograd::{Tape, Var};
use crate::derive::DerivedGraph;
use crate::error::{ModelError, TrainError};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

pub use crate::nn::TrainConfig;

use super::{BoxPrediction, GraphBatch, Processor, ProcessorConfig};

/// Box regression targets are pulled this far inside the unit interval.
/// A sigmoid never reaches 0 or 1, and chasing a full-width target drives
/// its logit (and the shared hidden features) without bound until other
/// coordinates saturate and stop learning.
pub const BOX_TARGET_MARGIN: f64 = 0.01;

/// A graph with one box/mask target per node.
pub type TrainingExample = DerivedGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// `λ_b`, box regression.
    pub boxes: f64,
    /// `λ_gm`, adversarial term on masks.
    pub mask_gan: f64,
    /// `λ_fm`, feature matching on masks.
    pub mask_fm: f64,
    /// Divide each feature-matching tap by its feature count.
    pub fm_per_feature: bool,
    pub gan_variant: GanVariant,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            boxes: 10.0,
            mask_gan: 1.0,
            mask_fm: 10.0,
            fm_per_feature: true,
            gan_variant: GanVariant::Vanilla,
        }
    }
}

/// The mask discriminator sees a mask plus one constant plane per class
/// (one-hot of the node's class).
pub fn mask_discriminator(cfg: &ProcessorConfig, classes: usize) -> PatchDiscriminator {
    PatchDiscriminator {
        in_channels: 1 + classes,
        widths: cfg.mask_disc_widths.clone(),
    }
}

/// `[n, C, M, M]` class indicator planes.
pub fn class_planes(classes: &[usize], channels: usize, m: usize) -> Tensor {
    let plane = m * m;
    let mut data = vec![0.0; classes.len() * channels * plane];
    for (i, &c) in classes.iter().enumerate() {
        let off = (i * channels + c) * plane;
        data[off..off + plane].fill(1.0);
    }
    Tensor::new(&[classes.len(), channels, m, m], data)
}

/// Tape handles of the processor objective and its components.
pub struct ProcessorLoss {
    pub total: Var,
    /// Unweighted mean squared box error.
    pub box_mse: Var,
    /// Unweighted generator-side adversarial term.
    pub gan: Var,
    /// Unweighted feature-matching term.
    pub fm: Var,
}

/// `L_SG = λ_b·MSE(b, b̂) + λ_gm·L_GAN(m, m̂) + λ_fm·L_FM(m, m̂)`.
///
/// `pred_masks` and `gt_masks` are `[n, 1, M, M]`, `planes` the matching
/// class planes. The discriminator is read through `dp`, which may be bound
/// as constants (processor step) or trainable.
#[allow(clippy::too_many_arguments)]
pub fn processor_loss(
    tape: &mut Tape,
    pred_boxes: Var,
    pred_masks: Var,
    gt_boxes: Var,
    gt_masks: Var,
    planes: Var,
    disc: &PatchDiscriminator,
    dp: &Bound,
    weights: &LossWeights,
) -> Result<ProcessorLoss, ModelError> {
    if tape.shape(pred_boxes) != tape.shape(gt_boxes) {
        return Err(ModelError::Shape(format!(
            "predicted boxes {:?} vs targets {:?}",
            tape.shape(pred_boxes),
            tape.shape(gt_boxes)
        )));
    }
    if tape.shape(pred_masks) != tape.shape(gt_masks) {
        return Err(ModelError::Shape(format!(
            "predicted masks {:?} vs targets {:?}",
            tape.shape(pred_masks),
            tape.shape(gt_masks)
        )));
    }
    let s = tape.shape(pred_masks).to_vec();
    disc.check_input(s[1] + tape.shape(planes)[1], s[2], s[3])?;
    let diff = tape.sub(pred_boxes, gt_boxes);
    let sq = tape.square(diff);
    let box_mse = tape.mean(sq);

    let fake_in = tape.concat(&[pred_masks, planes], 1);
    let real_in = tape.concat(&[gt_masks, planes], 1);
    let fake = disc.forward(tape, dp, fake_in);
    let real = disc.forward(tape, dp, real_in);
    let (_, gan) = gan_loss(tape, real.prob, fake.prob, weights.gan_variant);
    let fm = if weights.fm_per_feature {
        feature_matching_loss_per_feature(tape, &real.taps, &fake.taps)?
    } else {
        feature_matching_loss(tape, &real.taps, &fake.taps)?
    };

    let a = tape.scale(box_mse, weights.boxes);
    let b = tape.scale(gan, weights.mask_gan);
    let c = tape.scale(fm, weights.mask_fm);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    Ok(ProcessorLoss {
        total,
        box_mse,
        gan,
        fm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessorStepRecord {
    pub step: usize,
    pub total: f64,
    pub box_mse: f64,
    pub mask_gan: f64,
    pub mask_fm: f64,
    pub discriminator: f64,
}

pub struct ProcessorTraining {
    pub processor: Processor,
    pub discriminator: ParamStore,
    pub history: Vec<ProcessorStepRecord>,
}

struct Targets {
    boxes: Tensor,
    masks: Tensor,
    planes: Tensor,
}

fn batch_targets(examples: &[&TrainingExample], batch: &GraphBatch, channels: usize, m: usize) -> Result<Targets, ModelError> {
    let mut boxes = Vec::with_capacity(batch.len() * 4);
    let mut masks = Vec::with_capacity(batch.len() * m * m);
    for ex in examples {
        if ex.targets.len() != ex.graph.nodes.len() {
            return Err(ModelError::Shape(format!(
                "{} targets for {} nodes",
                ex.targets.len(),
                ex.graph.nodes.len()
            )));
        }
        for t in &ex.targets {
            if t.mask.len() != m * m {
                return Err(ModelError::Shape(format!(
                    "target mask has {} values, processor predicts {m}×{m}",
                    t.mask.len()
                )));
            }
            let b = BoxPrediction::from_box(&t.box2d).to_array();
            boxes.extend(b.map(|v| v.clamp(BOX_TARGET_MARGIN, 1.0 - BOX_TARGET_MARGIN)));
            masks.extend(&t.mask);
        }
    }
    let n = batch.len();
    Ok(Targets {
        boxes: Tensor::new(&[n, 4], boxes),
        masks: Tensor::new(&[n, 1, m, m], masks),
        planes: class_planes(&batch.classes, channels, m),
    })
}

/// Alternating mask-discriminator / processor updates over random batches
/// of `corpus`. Every `cfg.checkpoint_every` steps, and after the last step,
/// `on_checkpoint` receives the step count and the current processor.
pub fn train_processor(
    corpus: &[TrainingExample],
    mut processor: Processor,
    cfg: &TrainConfig,
    weights: &LossWeights,
    on_checkpoint: &mut dyn FnMut(usize, &Processor) -> Result<(), TrainError>,
) -> Result<ProcessorTraining, TrainError> {
    cfg.validate()?;
    let usable: Vec<&TrainingExample> = corpus.iter().filter(|e| !e.graph.nodes.is_empty()).collect();
    if usable.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let channels = processor.dims.classes;
    let m = processor.config.mask_size;
    let disc = mask_discriminator(&processor.config, channels);
    let mut disc_params = disc.init(&mut rng);
    let mut opt_p = cfg.adam(&processor.params);
    let mut opt_d = cfg.disc_adam(&disc_params);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        opt_p.lr = cfg.lr_at(step);
        opt_d.lr = opt_p.lr;
        let picks: Vec<&TrainingExample> = (0..cfg.batch)
            .map(|_| usable[rng.random_range(0..usable.len())])
            .collect();
        let batch = GraphBatch::new(picks.iter().map(|e| &e.graph));
        let targets = batch_targets(&picks, &batch, channels, m)?;

        let mut tape = Tape::new();
        let pp = processor.params.bind(&mut tape, true);
        let out = processor.forward(&mut tape, &pp, &batch)?;

        // Discriminator step on detached predictions.
        let d_loss = {
            let mut dt = Tape::new();
            let dp = disc_params.bind(&mut dt, true);
            let planes = dt.constant(targets.planes.clone());
            let fake = dt.constant(tape.value(out.masks).clone());
            let real = dt.constant(targets.masks.clone());
            let fake_in = dt.concat(&[fake, planes], 1);
            let real_in = dt.concat(&[real, planes], 1);
            let f = disc.forward(&mut dt, &dp, fake_in);
            let r = disc.forward(&mut dt, &dp, real_in);
            let (d, _) = gan_loss(&mut dt, r.prob, f.prob, weights.gan_variant);
            let value = dt.value(d).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            dt.backward(d);
            let g = dp.grads(&dt);
            opt_d.step(&mut disc_params, &g);
            value
        };

        // Processor step against the updated discriminator.
        let dp = disc_params.bind(&mut tape, false);
        let gt_boxes = tape.constant(targets.boxes);
        let gt_masks = tape.constant(targets.masks);
        let planes = tape.constant(targets.planes);
        let loss = processor_loss(
            &mut tape, out.boxes, out.masks, gt_boxes, gt_masks, planes, &disc, &dp, weights,
        )?;
        let rec = ProcessorStepRecord {
            step,
            total: tape.value(loss.total).item(),
            box_mse: tape.value(loss.box_mse).item(),
            mask_gan: tape.value(loss.gan).item(),
            mask_fm: tape.value(loss.fm).item(),
            discriminator: d_loss,
        };
        if !rec.total.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        tape.backward(loss.total);
        let g = pp.grads(&tape);
        drop(dp);
        drop(pp);
        opt_p.step(&mut processor.params, &g);
        history.push(rec);

        let done = step + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps {
            on_checkpoint(done, &processor)?;
        }
    }
    Ok(ProcessorTraining {
        processor,
        discriminator: disc_params,
        history,
    })
}
