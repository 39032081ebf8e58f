//! Named parameter storage, layer helpers on a [`Tape`], and the Adam
//! optimizer shared by every trainable network.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::tensor::Tensor;

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter. Insertion order is the storage order.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<(), ModelError> {
        for (name, t) in self.iter() {
            let o = other
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            if o.shape() != t.shape() {
                return Err(ModelError::Shape(format!(
                    "`{name}`: expected {:?}, found {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
        }
        if other.len() != self.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] recorded on a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// The tape variable of a parameter. Panics on unknown names, which
    /// are programming errors in the network definition.
    pub fn var(&self, name: &str) -> Var {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("network references unknown parameter `{name}`"),
        }
    }

    /// Gradients in storage order; parameters the root does not depend on
    /// get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.store.values)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

// ---- initialization --------------------------------------------------

/// `[in, out]` weight with scaled-normal init and a zero `[out]` bias.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    output: usize,
    rng: &mut R,
) {
    let std = (2.0 / input as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::randn(&[input, output], std, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[output]));
}

/// `[out, in, k, k]` convolution kernel and `[out]` bias.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    output: usize,
    kernel: usize,
    rng: &mut R,
) {
    let std = (2.0 / (input * kernel * kernel) as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        Tensor::randn(&[output, input, kernel, kernel], std, rng),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[output]));
}

/// `[in, out, k, k]` transposed-convolution kernel and `[out]` bias.
pub fn init_conv_transpose<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    output: usize,
    kernel: usize,
    rng: &mut R,
) {
    let std = (2.0 / (input * kernel * kernel) as f64).sqrt() * 2.0;
    store.insert(
        format!("{prefix}.weight"),
        Tensor::randn(&[input, output, kernel, kernel], std, rng),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[output]));
}

// ---- layers ------------------------------------------------------------

/// `x · W + b` for `x: [n, in]`.
pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let y = tape.matmul(x, p.var(&format!("{prefix}.weight")));
    tape.add_row_bias(y, p.var(&format!("{prefix}.bias")))
}

/// Two linear layers with a ReLU between them.
pub fn mlp2(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(tape, p, &format!("{prefix}.0"), x);
    let h = tape.relu(h);
    linear(tape, p, &format!("{prefix}.1"), h)
}

pub fn conv(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
    let y = tape.conv2d(x, p.var(&format!("{prefix}.weight")), stride, pad);
    tape.add_channel_bias(y, p.var(&format!("{prefix}.bias")))
}

pub fn conv_transpose(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let y = tape.conv_transpose2d(x, p.var(&format!("{prefix}.weight")), stride, pad);
    tape.add_channel_bias(y, p.var(&format!("{prefix}.bias")))
}

// ---- optimizer ---------------------------------------------------------

/// Settings of an alternating adversarial training loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Examples per step.
    pub batch: usize,
    pub learning_rate: f64,
    /// Adam `beta1` of the trained network.
    pub momentum: f64,
    /// Adam `beta1` of its discriminator.
    pub disc_momentum: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Learning rate at the last step as a fraction of `learning_rate`,
    /// reached by linear decay. 1 keeps the rate constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            learning_rate: 1e-3,
            momentum: 0.99,
            disc_momentum: 0.5,
            beta2: 0.999,
            seed: 0,
            checkpoint_every: 0,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch == 0 {
            return Err(ModelError::Config("batch must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.disc_momentum)
            || !(0.0..1.0).contains(&self.beta2) {
            return Err(ModelError::Config("learning rate must be positive and betas in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(ModelError::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 0.0 };
        self.learning_rate * (1.0 - t * (1.0 - self.final_lr_fraction))
    }

    pub fn adam(&self, params: &ParamStore) -> Adam {
        Adam::new(params, self.learning_rate, self.momentum, self.beta2)
    }

    pub fn disc_adam(&self, params: &ParamStore) -> Adam {
        Adam::new(params, self.learning_rate, self.disc_momentum, self.beta2)
    }
}


/// Adam with bias correction. `beta1` plays the role of momentum.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = self.lr / c1;
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = &mut params.values[i];
            for (((wv, mv), vv), &gv) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *wv -= step_size * *mv / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}
