//! Patch discriminators and the adversarial / feature-matching losses
//! shared by the mask and image branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::nn::{conv, init_conv, Bound, ParamStore};

/// Clamp applied inside every logarithm of the adversarial loss.
pub const GAN_LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GanVariant {
    /// Cross-entropy form with the non-saturating generator objective.
    #[default]
    Vanilla,
    /// Squared-error form: `E(d_real − 1)² + E d_fake²` and `E(d_fake − 1)²`.
    LeastSquares,
}

/// A fully convolutional classifier producing one probability per patch.
///
/// Layout: `depth` stride-2 4×4 convolutions with leaky ReLU, each output
/// exposed as a feature tap, then a 3×3 convolution to one channel and a
/// sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchDiscriminator {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

pub struct DiscOutput {
    /// `[N, 1, h, w]` probabilities in (0, 1).
    pub prob: Var,
    /// Intermediate activations, one per downsampling block.
    pub taps: Vec<Var>,
}

impl PatchDiscriminator {
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        let mut c = self.in_channels;
        for (k, &w) in self.widths.iter().enumerate() {
            init_conv(&mut p, &format!("block{k}"), c, w, 4, rng);
            c = w;
        }
        init_conv(&mut p, "head", c, 1, 3, rng);
        p
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> DiscOutput {
        let mut h = x;
        let mut taps = Vec::with_capacity(self.widths.len());
        for k in 0..self.widths.len() {
            let y = conv(tape, p, &format!("block{k}"), h, 2, 1);
            h = tape.leaky_relu(y, 0.2);
            taps.push(h);
        }
        let logits = conv(tape, p, "head", h, 1, 1);
        DiscOutput {
            prob: tape.sigmoid(logits),
            taps,
        }
    }

    /// Input side must be divisible by `2^depth`.
    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<(), ModelError> {
        let f = 1usize << self.widths.len();
        if channels != self.in_channels {
            return Err(ModelError::Shape(format!(
                "discriminator expects {} channels, got {channels}",
                self.in_channels
            )));
        }
        if height % f != 0 || width % f != 0 || height < f || width < f {
            return Err(ModelError::Shape(format!(
                "discriminator input {height}×{width} not divisible by {f}"
            )));
        }
        Ok(())
    }
}

/// Discriminator and generator objectives on a tape:
/// `(−E log d_real − E log(1 − d_fake), −E log d_fake)` for the vanilla
/// variant. Means are order-independent so reordering a batch leaves the
/// values bit-identical.
pub fn gan_loss(tape: &mut Tape, d_real: Var, d_fake: Var, variant: GanVariant) -> (Var, Var) {
    match variant {
        GanVariant::Vanilla => {
            let lr = tape.log_clamped(d_real, GAN_LOG_EPS);
            let lr = tape.mean_unordered(lr);
            let one_minus = tape.scale(d_fake, -1.0);
            let one_minus = tape.add_scalar(one_minus, 1.0);
            let lf = tape.log_clamped(one_minus, GAN_LOG_EPS);
            let lf = tape.mean_unordered(lf);
            let d = tape.add(lr, lf);
            let d = tape.scale(d, -1.0);
            (d, generator_objective(tape, d_fake, variant))
        }
        GanVariant::LeastSquares => {
            let r = tape.add_scalar(d_real, -1.0);
            let r = tape.square(r);
            let r = tape.mean_unordered(r);
            let f = tape.square(d_fake);
            let f = tape.mean_unordered(f);
            let d = tape.add(r, f);
            (d, generator_objective(tape, d_fake, variant))
        }
    }
}

/// The generator half of [`gan_loss`]: `−E log d_fake` (vanilla) or
/// `E(d_fake − 1)²` (least squares).
pub fn generator_objective(tape: &mut Tape, d_fake: Var, variant: GanVariant) -> Var {
    match variant {
        GanVariant::Vanilla => {
            let lg = tape.log_clamped(d_fake, GAN_LOG_EPS);
            let lg = tape.mean_unordered(lg);
            tape.scale(lg, -1.0)
        }
        GanVariant::LeastSquares => {
            let gf = tape.add_scalar(d_fake, -1.0);
            let gf = tape.square(gf);
            tape.mean_unordered(gf)
        }
    }
}

/// Plain-value form of the vanilla [`gan_loss`], rejecting inputs outside
/// `[0, 1]`.
pub fn gan_loss_values(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64), ModelError> {
    if let Some(v) = d_real
        .iter()
        .chain(d_fake)
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(ModelError::Shape(format!(
            "discriminator output {v} outside [0, 1]"
        )));
    }
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(ModelError::Shape("empty discriminator output".into()));
    }
    let mean_log = |xs: &mut dyn Iterator<Item = f64>, n: usize| {
        let mut terms: Vec<f64> = xs.map(|x| x.max(GAN_LOG_EPS).ln()).collect();
        terms.sort_by(f64::total_cmp);
        terms.iter().sum::<f64>() / n as f64
    };
    let real = mean_log(&mut d_real.iter().copied(), d_real.len());
    let fake_neg = mean_log(&mut d_fake.iter().map(|x| 1.0 - x), d_fake.len());
    let fake = mean_log(&mut d_fake.iter().copied(), d_fake.len());
    Ok((-real - fake_neg, -fake))
}

/// `Σ_taps ‖mean_batch f(real) − mean_batch f(fake)‖²`.
pub fn feature_matching_loss(
    tape: &mut Tape,
    real: &[Var],
    fake: &[Var],
) -> Result<Var, ModelError> {
    fm_impl(tape, real, fake, false)
}

/// [`feature_matching_loss`] with each tap's squared distance divided by
/// its per-sample feature count, so the term does not grow with
/// discriminator width or input size.
pub fn feature_matching_loss_per_feature(
    tape: &mut Tape,
    real: &[Var],
    fake: &[Var],
) -> Result<Var, ModelError> {
    fm_impl(tape, real, fake, true)
}

fn fm_impl(tape: &mut Tape, real: &[Var], fake: &[Var], per_feature: bool) -> Result<Var, ModelError> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(ModelError::Shape(format!(
            "feature matching needs equal, non-empty tap lists ({} vs {})",
            real.len(),
            fake.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&r, &f) in real.iter().zip(fake) {
        if tape.shape(r)[1..] != tape.shape(f)[1..] {
            return Err(ModelError::Shape(format!(
                "tap shapes {:?} and {:?} differ",
                tape.shape(r),
                tape.shape(f)
            )));
        }
        let mr = tape.mean_axis0(r);
        let mf = tape.mean_axis0(f);
        let d = tape.sub(mr, mf);
        let sq = tape.square(d);
        let s = if per_feature { tape.mean(sq) } else { tape.sum(sq) };
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    Ok(total.expect("non-empty"))
}
