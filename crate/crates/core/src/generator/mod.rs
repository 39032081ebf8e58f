//! The layout-to-image generator: a convolutional encoder whose block
//! outputs double as contrastive feature taps, a residual body, and a
//! transposed-convolution decoder squashed to `[0, 1]`.

mod nce;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::PatchDiscriminator;
use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::layout::Layout;
use crate::nn::{conv, conv_transpose, init_conv, init_conv_transpose, Bound, ParamStore};
use crate::tensor::Tensor;

pub use nce::{
    gather_locations, patch_nce_loss, patch_nce_values, sample_locations, NceConfig, NceModel,
};
pub use train::{
    canonical_order, train_generator, GeneratorLossWeights, GeneratorStepRecord, GeneratorTraining,
};

/// Number of stride-1/stride-2 encoder blocks; block `l` (1-based) is NCE tap `l`.
pub const ENCODER_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Channel widths of the three encoder blocks; the decoder mirrors them.
    pub widths: [usize; ENCODER_BLOCKS],
    pub residual_blocks: usize,
    /// Widths of the image discriminator's stride-2 blocks.
    pub disc_widths: Vec<usize>,
    pub nce: NceConfig,
    pub weights: GeneratorLossWeights,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            residual_blocks: 2,
            disc_widths: vec![32, 64, 64],
            nce: NceConfig::default(),
            weights: GeneratorLossWeights::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.contains(&0) || self.disc_widths.contains(&0) || self.disc_widths.is_empty() {
            return Err(ModelError::Config("generator and discriminator widths must be positive".into()));
        }
        self.nce.validate()
    }

    pub fn discriminator(&self) -> PatchDiscriminator {
        PatchDiscriminator {
            in_channels: 3,
            widths: self.disc_widths.clone(),
        }
    }

    /// Image side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        4usize.max(1 << self.disc_widths.len())
    }
}

pub struct GeneratorOutput {
    /// `[N, 3, H, W]` in `[0, 1]`.
    pub image: Var,
    /// Encoder block outputs, one per block.
    pub taps: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    /// Layout channels (= classes).
    pub classes: usize,
    pub params: ParamStore,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, classes: usize, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        if classes == 0 {
            return Err(ModelError::Config("generator needs at least one layout channel".into()));
        }
        let params = init_params(&config, classes, rng);
        Ok(Self { config, classes, params })
    }

    /// Wraps trained weights, checking names and shapes against `config`.
    pub fn from_params(config: GeneratorConfig, classes: usize, params: ParamStore) -> Result<Self, ModelError> {
        let reference = Self::new(config, classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        reference.params.check_compatible(&params)?;
        Ok(Self { params, ..reference })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let f = self.config.size_multiple();
        if shape.len() != 4 || shape[1] != self.classes {
            return Err(ModelError::Shape(format!(
                "generator expects [N, {}, H, W] layouts, got {shape:?}",
                self.classes
            )));
        }
        if shape[2] % f != 0 || shape[3] % f != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(ModelError::Shape(format!(
                "layout size {}×{} must be a positive multiple of {f}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, layout: Var) -> Result<GeneratorOutput, ModelError> {
        self.check_input(tape.shape(layout))?;
        let taps = encode(tape, p, "enc", layout);
        let mut h = *taps.last().expect("three encoder blocks");
        for k in 0..self.config.residual_blocks {
            let a = conv(tape, p, &format!("res{k}.a"), h, 1, 1);
            let a = tape.relu(a);
            let b = conv(tape, p, &format!("res{k}.b"), a, 1, 1);
            let s = tape.add(h, b);
            h = tape.relu(s);
        }
        for k in 0..ENCODER_BLOCKS - 1 {
            let u = conv_transpose(tape, p, &format!("dec{k}"), h, 2, 1);
            h = tape.relu(u);
        }
        let y = conv(tape, p, "out", h, 1, 1);
        Ok(GeneratorOutput {
            image: tape.sigmoid(y),
            taps,
        })
    }

    /// Image for one layout, `[3, H, W]`.
    pub fn generate(&self, layout: &Layout) -> Result<Tensor, ModelError> {
        let t = layout.to_tensor();
        let shape = t.shape().to_vec();
        let x = t.reshaped(&[1, shape[0], shape[1], shape[2]]);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x);
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out.image).clone().reshaped(&[3, shape[1], shape[2]]))
    }
}

/// The three-block encoder shared by the generator (over layouts) and the
/// contrastive query encoder (over images): a 3×3 stride-1 convolution and
/// two 4×4 stride-2 convolutions, each followed by ReLU.
pub(crate) fn encode(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Vec<Var> {
    let mut taps = Vec::with_capacity(ENCODER_BLOCKS);
    let mut h = x;
    for l in 0..ENCODER_BLOCKS {
        let name = format!("{prefix}{l}");
        let y = if l == 0 {
            conv(tape, p, &name, h, 1, 1)
        } else {
            conv(tape, p, &name, h, 2, 1)
        };
        h = tape.relu(y);
        taps.push(h);
    }
    taps
}

pub(crate) fn init_encoder<R: Rng + ?Sized>(p: &mut ParamStore, prefix: &str, input: usize, widths: &[usize; ENCODER_BLOCKS], rng: &mut R) {
    let mut c = input;
    for (l, &w) in widths.iter().enumerate() {
        init_conv(p, &format!("{prefix}{l}"), c, w, if l == 0 { 3 } else { 4 }, rng);
        c = w;
    }
}

fn init_params<R: Rng + ?Sized>(cfg: &GeneratorConfig, classes: usize, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    let w = cfg.widths;
    init_encoder(&mut p, "enc", classes, &w, rng);
    for k in 0..cfg.residual_blocks {
        init_conv(&mut p, &format!("res{k}.a"), w[2], w[2], 3, rng);
        init_conv(&mut p, &format!("res{k}.b"), w[2], w[2], 3, rng);
        // Residual branches start near identity.
        if let Some(t) = p.get_mut(&format!("res{k}.b.weight")) {
            *t = t.map(|v| v * 0.1);
        }
    }
    init_conv_transpose(&mut p, "dec0", w[2], w[1], 4, rng);
    init_conv_transpose(&mut p, "dec1", w[1], w[0], 4, rng);
    init_conv(&mut p, "out", w[0], 3, 3, rng);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            widths: [3, 4, 4],
            residual_blocks: 1,
            disc_widths: vec![4, 4],
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes_at_configured_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(GeneratorConfig::default(), 8, &mut rng).unwrap();
        for (h, w) in [(64, 128), (128, 256)] {
            let img = g.generate(&Layout::zeros(8, h, w)).unwrap();
            assert_eq!(img.shape(), &[3, h, w]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_output_layer_gives_mid_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Generator::new(small(), 5, &mut rng).unwrap();
        for name in ["out.weight", "out.bias"] {
            let t = g.params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let layout = Layout::from_class_map(&[0, 1, 2, 3].repeat(16), 5, 8, 8);
        let img = g.generate(&layout).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Generator::new(small(), 5, &mut rng).unwrap();
        assert!(g.generate(&Layout::zeros(4, 8, 8)).is_err());
        assert!(g.generate(&Layout::zeros(5, 6, 8)).is_err());
    }

    #[test]
    fn gradient_wrt_layout_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Generator::new(small(), 2, &mut rng).unwrap();
        let layout = Tensor::uniform(&[1, 2, 8, 8], 0.0, 1.0, &mut rng);
        let weights = Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let err = max_rel_error(&[layout], 0, 1e-5, |tape, v| {
            let p = g.params.bind(tape, false);
            let out = g.forward(tape, &p, v[0]).unwrap();
            let w = tape.constant(weights.clone());
            let prod = tape.mul(out.image, w);
            tape.sum(prod)
        });
        assert!(err < 1e-3, "rel err {err}");
    }
}
