//! Evaluation metrics: layout IoU, box IoU, and a Fréchet distance over
//! features of a fixed random convolutional probe.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::ModelError;
use crate::nn::{conv, init_conv, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouMetrics {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in either map (1 if none is).
    pub mean: f64,
}

/// Per-class intersection over union of two class maps.
pub fn layout_iou(pred: &[u16], gt: &[u16], classes: usize) -> Result<IouMetrics, ModelError> {
    if pred.len() != gt.len() {
        return Err(ModelError::Shape(format!(
            "class maps differ in size ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(ModelError::Index(format!("class id {} out of {classes}", p.max(g))));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouMetrics { per_class, mean })
}

/// Fréchet distance between Gaussians fitted to two feature sets (rows are
/// samples): `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
///
/// `eps` is added to both covariance diagonals, which keeps the square
/// roots well-defined for rank-deficient sample sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>], eps: f64) -> Result<f64, ModelError> {
    let d = a.first().map(Vec::len).unwrap_or(0);
    if a.len() < 2 || b.len() < 2 || d == 0 {
        return Err(ModelError::Shape("Fréchet distance needs two samples per set".into()));
    }
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(ModelError::Shape("feature rows differ in length".into()));
    }
    let (ma, ca) = moments(a, eps);
    let (mb, cb) = moments(b, eps);
    let ra = sym_sqrt(&ca);
    let inner = sym_sqrt(&(&ra * &cb * &ra));
    let dist = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * inner.trace();
    Ok(dist.max(0.0))
}

fn moments(rows: &[Vec<f64>], eps: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    for j in 0..d {
        cov[(j, j)] += eps;
    }
    (mean, cov)
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// small negative eigenvalues from round-off are clipped to 0.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// A fixed, seeded random convolutional feature extractor for images.
///
/// Two stride-2 4×4 convolutions with ReLU; the feature vector is the
/// per-channel mean of the input and of each layer's activations over
/// each cell of a `rows × cols` grid.
#[derive(Debug, Clone)]
pub struct FrechetProbe {
    params: ParamStore,
    widths: Vec<usize>,
    grid: (usize, usize),
}

impl FrechetProbe {
    pub fn new(seed: u64) -> Self {
        let widths = vec![8, 16];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut c = 3;
        for (k, &w) in widths.iter().enumerate() {
            init_conv(&mut params, &format!("probe{k}"), c, w, 4, &mut rng);
            c = w;
        }
        Self {
            params,
            widths,
            grid: (2, 2),
        }
    }

    pub fn dim(&self) -> usize {
        (3 + self.widths.iter().sum::<usize>()) * self.grid.0 * self.grid.1
    }

    /// Feature vector of one `[3, H, W]` image (`H`, `W` divisible by 4·grid).
    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>, ModelError> {
        let s = image.shape();
        let f = 4 * self.grid.0.max(self.grid.1);
        if s.len() != 3 || s[0] != 3 || s[1] % f != 0 || s[2] % f != 0 || s[1] == 0 || s[2] == 0 {
            return Err(ModelError::Shape(format!(
                "probe expects [3, H, W] with H, W multiples of {f}, got {s:?}"
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut h = tape.constant(image.clone().reshaped(&[1, 3, s[1], s[2]]));
        let mut out = self.pool(tape.value(h));
        for k in 0..self.widths.len() {
            let y = conv(&mut tape, &p, &format!("probe{k}"), h, 2, 1);
            h = tape.relu(y);
            out.extend(self.pool(tape.value(h)));
        }
        Ok(out)
    }

    fn pool(&self, t: &Tensor) -> Vec<f64> {
        let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
        let (gr, gc) = self.grid;
        let (ch, cw) = (h / gr, w / gc);
        let mut out = Vec::with_capacity(c * gr * gc);
        for ci in 0..c {
            let plane = &t.data()[ci * h * w..(ci + 1) * h * w];
            for r in 0..gr {
                for q in 0..gc {
                    let mut s = 0.0;
                    for y in r * ch..(r + 1) * ch {
                        s += plane[y * w + q * cw..y * w + (q + 1) * cw].iter().sum::<f64>();
                    }
                    out.push(s / (ch * cw) as f64);
                }
            }
        }
        out
    }

    /// Fréchet distance between two image sets under this probe.
    pub fn distance(&self, a: &[Tensor], b: &[Tensor]) -> Result<f64, ModelError> {
        let fa = a.iter().map(|x| self.features(x)).collect::<Result<Vec<_>, _>>()?;
        let fb = b.iter().map(|x| self.features(x)).collect::<Result<Vec<_>, _>>()?;
        frechet_distance(&fa, &fb, FRECHET_EPS)
    }
}

/// Diagonal regularizer of [`FrechetProbe::distance`].
pub const FRECHET_EPS: f64 = 1e-6;
