//! Unpaired adversarial + contrastive training of the generator.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Generator, NceModel};
use crate::adversarial::{gan_loss, generator_objective, GanVariant};
use crate::autograd::Tape;
use crate::error::{ModelError, TrainError};
use crate::layout::Layout;
use crate::nn::{ParamStore, TrainConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorLossWeights {
    /// `λ_g`, adversarial term.
    pub gan: f64,
    /// `λ_nce`, contrastive term.
    pub nce: f64,
    pub gan_variant: GanVariant,
}

impl Default for GeneratorLossWeights {
    fn default() -> Self {
        Self {
            gan: 1.0,
            nce: 1.0,
            gan_variant: GanVariant::Vanilla,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStepRecord {
    pub step: usize,
    pub total: f64,
    pub gan: f64,
    pub nce: f64,
    pub discriminator: f64,
    /// Mean discriminator output on the generated batch, after the
    /// discriminator's update of this step.
    pub d_fake: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratorTraining {
    pub generator: Generator,
    pub nce: NceModel,
    pub discriminator: ParamStore,
    pub history: Vec<GeneratorStepRecord>,
}

/// Indices sorting `images` by content (shape, then values under a total
/// order). Training draws from the target set in this order, so the order
/// in which targets are supplied cannot influence anything.
pub fn canonical_order(images: &[Tensor]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..images.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&images[a], &images[b]);
        x.shape().cmp(y.shape()).then_with(|| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    idx
}

fn stack_layouts(layouts: &[&Layout]) -> Tensor {
    Tensor::stack(&layouts.iter().map(|l| l.to_tensor()).collect::<Vec<_>>())
}

/// Alternating image-discriminator / generator updates.
///
/// Layouts and target images are sampled independently; nothing pairs
/// them. Every `cfg.checkpoint_every` steps, and after the last,
/// `on_checkpoint` receives the step count and the current generator.
pub fn train_generator(
    layouts: &[Layout],
    targets: &[Tensor],
    mut generator: Generator,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &Generator) -> Result<(), TrainError>,
) -> Result<GeneratorTraining, TrainError> {
    cfg.validate()?;
    if layouts.is_empty() || targets.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (h, w) = (layouts[0].height(), layouts[0].width());
    for l in layouts {
        generator.check_input(&[1, l.classes(), l.height(), l.width()])?;
        if (l.height(), l.width()) != (h, w) {
            return Err(ModelError::Shape("layouts differ in size".into()).into());
        }
    }
    if let Some(t) = targets.iter().find(|t| t.shape() != [3, h, w]) {
        return Err(ModelError::Shape(format!(
            "target image {:?} does not match layouts [3, {h}, {w}]",
            t.shape()
        ))
        .into());
    }
    let order = canonical_order(targets);
    let gcfg = generator.config.clone();
    let weights = gcfg.weights;
    let disc = gcfg.discriminator();
    disc.check_input(3, h, w)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc_params = disc.init(&mut rng);
    let mut nce = NceModel::new(&gcfg.nce, &gcfg.widths, &mut rng);
    let mut opt_g = cfg.adam(&generator.params);
    let mut opt_n = cfg.adam(&nce.params);
    let mut opt_d = cfg.disc_adam(&disc_params);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        opt_g.lr = lr;
        opt_n.lr = lr;
        opt_d.lr = lr;
        let picks: Vec<&Layout> = (0..cfg.batch).map(|_| &layouts[rng.random_range(0..layouts.len())]).collect();
        let reals: Vec<Tensor> = (0..cfg.batch)
            .map(|_| targets[order[rng.random_range(0..order.len())]].clone())
            .collect();
        let real = Tensor::stack(&reals);

        let mut tape = Tape::new();
        let gp = generator.params.bind(&mut tape, true);
        let x = tape.constant(stack_layouts(&picks));
        let out = generator.forward(&mut tape, &gp, x)?;

        let d_loss = {
            let mut dt = Tape::new();
            let dp = disc_params.bind(&mut dt, true);
            let fake = dt.constant(tape.value(out.image).clone());
            let real = dt.constant(real);
            let f = disc.forward(&mut dt, &dp, fake);
            let r = disc.forward(&mut dt, &dp, real);
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

        let dp = disc_params.bind(&mut tape, false);
        let f = disc.forward(&mut tape, &dp, out.image);
        let d_fake = tape.value(f.prob).mean();
        let g_obj = generator_objective(&mut tape, f.prob, weights.gan_variant);
        let np = nce.params.bind(&mut tape, true);
        let nce_loss = NceModel::loss(&gcfg.nce, &mut tape, &np, out.image, &out.taps, &mut rng)?;
        let a = tape.scale(g_obj, weights.gan);
        let b = tape.scale(nce_loss, weights.nce);
        let total = tape.add(a, b);
        let rec = GeneratorStepRecord {
            step,
            total: tape.value(total).item(),
            gan: tape.value(g_obj).item(),
            nce: tape.value(nce_loss).item(),
            discriminator: d_loss,
            d_fake,
        };
        if !rec.total.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        tape.backward(total);
        let gg = gp.grads(&tape);
        let ng = np.grads(&tape);
        drop((gp, np, dp));
        opt_g.step(&mut generator.params, &gg);
        opt_n.step(&mut nce.params, &ng);
        history.push(rec);

        let done = step + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps {
            on_checkpoint(done, &generator)?;
        }
    }
    Ok(GeneratorTraining {
        generator,
        nce,
        discriminator: disc_params,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn small() -> GeneratorConfig {
        let mut c = GeneratorConfig {
            widths: [4, 8, 8],
            residual_blocks: 1,
            disc_widths: vec![8, 8],
            ..Default::default()
        };
        c.nce.patches = 4;
        c.nce.projection = 8;
        c
    }

    fn data(seed: u64) -> (Vec<Layout>, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layouts = (0..3)
            .map(|k| {
                let map: Vec<u16> = (0..64).map(|p| ((p / 8 + k) % 3) as u16).collect();
                Layout::from_class_map(&map, 3, 8, 8)
            })
            .collect();
        let targets = (0..4).map(|_| Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng)).collect();
        (layouts, targets)
    }

    fn run(layouts: &[Layout], targets: &[Tensor], steps: usize) -> GeneratorTraining {
        let g = Generator::new(small(), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = TrainConfig {
            steps,
            batch: 2,
            seed: 5,
            ..Default::default()
        };
        train_generator(layouts, targets, g, &cfg, &mut |_, _| Ok(())).unwrap()
    }

    #[test]
    fn same_seed_same_history() {
        let (l, t) = data(0);
        let a = run(&l, &t, 6);
        let b = run(&l, &t, 6);
        assert_eq!(a.history, b.history);
        assert_eq!(a.generator, b.generator);
    }

    #[test]
    fn target_order_does_not_matter() {
        let (l, t) = data(0);
        let mut shuffled = t.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert_eq!(run(&l, &t, 5).history, run(&l, &shuffled, 5).history);
    }

    #[test]
    fn mismatched_targets_rejected() {
        let (l, _) = data(0);
        let g = Generator::new(small(), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bad = vec![Tensor::zeros(&[3, 8, 16])];
        let r = train_generator(&l, &bad, g, &TrainConfig::default(), &mut |_, _| Ok(()));
        assert!(matches!(r, Err(TrainError::Model(_))));
        let g = Generator::new(small(), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r = train_generator(&l, &[], g, &TrainConfig::default(), &mut |_, _| Ok(()));
        assert!(matches!(r, Err(TrainError::EmptyCorpus)));
    }
}
