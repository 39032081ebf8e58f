//! Patch-wise contrastive loss between generated images and their input
//! layouts, with negatives drawn from other locations of the same image.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{encode, init_encoder, ENCODER_BLOCKS};
use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::nn::{init_linear, mlp2, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NceConfig {
    /// Encoder blocks (1-based) whose outputs are compared.
    pub taps: Vec<usize>,
    /// Sampled locations per tap and image.
    pub patches: usize,
    pub temperature: f64,
    /// Width of the projection heads.
    pub projection: usize,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            taps: vec![1, 2, 3],
            patches: 64,
            temperature: 0.07,
            projection: 64,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patches == 0 || !(self.temperature > 0.0) || self.projection == 0 {
            return Err(ModelError::Config("nce needs patches ≥ 1, temperature > 0 and a projection width".into()));
        }
        if self.taps.is_empty() || self.taps.iter().any(|&t| t == 0 || t > ENCODER_BLOCKS) {
            return Err(ModelError::Config(format!("nce taps must be a non-empty subset of 1..={ENCODER_BLOCKS}")));
        }
        Ok(())
    }
}

/// `s` distinct flat positions out of `height × width`.
pub fn sample_locations<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    s: usize,
    rng: &mut R,
) -> Result<Vec<usize>, ModelError> {
    let n = height * width;
    if s > n {
        return Err(ModelError::Shape(format!(
            "cannot sample {s} patches from a {height}×{width} feature map"
        )));
    }
    Ok(sample(rng, n, s).into_vec())
}

/// Feature vectors of image `b` of `feat: [N, C, H, W]` at flat positions
/// `locs`, as `[locs.len(), C]`.
pub fn gather_locations(tape: &mut Tape, feat: Var, b: usize, locs: &[usize]) -> Var {
    let shape = tape.shape(feat).to_vec();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let one = tape.slice(feat, 0, b, 1);
    let flat = tape.reshape(one, &[c, hw]);
    let rows = tape.transpose(flat);
    tape.gather_rows(rows, locs)
}

/// Mean InfoNCE over layers: for each layer's `[S, d]` query and key
/// matrices, row `s` of `q·kᵀ/τ` is a softmax whose correct class is `s`.
pub fn patch_nce_loss(tape: &mut Tape, queries: &[Var], keys: &[Var], temperature: f64) -> Result<Var, ModelError> {
    if queries.len() != keys.len() || queries.is_empty() {
        return Err(ModelError::Shape("nce needs one key matrix per query matrix".into()));
    }
    let mut total: Option<Var> = None;
    for (&q, &k) in queries.iter().zip(keys) {
        if tape.shape(q) != tape.shape(k) || tape.shape(q).len() != 2 {
            return Err(ModelError::Shape(format!(
                "query {:?} and key {:?} must be equal [S, d] matrices",
                tape.shape(q),
                tape.shape(k)
            )));
        }
        let s = tape.shape(q)[0];
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let logits = tape.scale(logits, 1.0 / temperature);
        let lsm = tape.log_softmax_rows(logits);
        let diag: Vec<usize> = (0..s).collect();
        let picked = tape.pick_per_row(lsm, &diag);
        let l = tape.mean(picked);
        let l = tape.scale(l, -1.0);
        total = Some(match total {
            Some(t) => tape.add(t, l),
            None => l,
        });
    }
    let n = queries.len() as f64;
    Ok(tape.scale(total.expect("non-empty"), 1.0 / n))
}

/// Value-only [`patch_nce_loss`] for one layer.
pub fn patch_nce_values(q: &Tensor, k: &Tensor, temperature: f64) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let q = tape.constant(q.clone());
    let k = tape.constant(k.clone());
    let l = patch_nce_loss(&mut tape, &[q], &[k], temperature)?;
    Ok(tape.value(l).item())
}

/// The trainable side of the contrastive term: an image encoder that
/// reads generated images back into the generator's tap geometry, and one
/// two-layer projection head per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct NceModel {
    pub params: ParamStore,
}

impl NceModel {
    pub fn new<R: Rng + ?Sized>(cfg: &NceConfig, widths: &[usize; ENCODER_BLOCKS], rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        init_encoder(&mut params, "query", 3, widths, rng);
        for &t in &cfg.taps {
            let c = widths[t - 1];
            init_linear(&mut params, &format!("head{t}.0"), c, cfg.projection, rng);
            init_linear(&mut params, &format!("head{t}.1"), cfg.projection, cfg.projection, rng);
        }
        Self { params }
    }

    /// Contrastive loss of a generated batch against the generator's own
    /// encoder taps over the layouts. Keys are treated as constants.
    pub fn loss<R: Rng + ?Sized>(
        cfg: &NceConfig,
        tape: &mut Tape,
        p: &Bound,
        image: Var,
        layout_taps: &[Var],
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let query_taps = encode(tape, p, "query", image);
        let n = tape.shape(image)[0];
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        for &t in &cfg.taps {
            let (qf, kf) = (query_taps[t - 1], layout_taps[t - 1]);
            let kf = tape.constant(tape.value(kf).clone());
            let shape = tape.shape(qf).to_vec();
            for b in 0..n {
                let locs = sample_locations(shape[2], shape[3], cfg.patches, rng)?;
                let head = format!("head{t}");
                let q = gather_locations(tape, qf, b, &locs);
                let q = mlp2(tape, p, &head, q);
                qs.push(tape.l2_normalize_rows(q, 1e-12));
                let k = gather_locations(tape, kf, b, &locs);
                let k = mlp2(tape, p, &head, k);
                let k = tape.l2_normalize_rows(k, 1e-12);
                ks.push(tape.constant(tape.value(k).clone()));
            }
        }
        patch_nce_loss(tape, &qs, &ks, cfg.temperature)
    }
}
