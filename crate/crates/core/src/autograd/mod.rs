//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and leaves
//! the gradient of that scalar with respect to every parameter leaf in the
//! tape. All arithmetic is `f64` so gradients can be checked against
//! central finite differences.

pub mod conv;

use crate::tensor::{gemm, Tensor};
use conv::{col2im, im2col, ConvGeometry};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one optional gradient per
/// input (in input order).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    LogClamp(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    PickPerRow(Var, Vec<usize>),
    L2NormalizeRows(Var, f64),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
        cols: Vec<Vec<f64>>,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        out_geom: ConvGeometry,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation, owned by a single forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Adds a length-`d` bias to every row of an `[n, d]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.value(x);
        let b = self.value(bias);
        assert_eq!(xs.shape().len(), 2, "add_row_bias expects a matrix");
        let d = xs.dim(1);
        assert_eq!(b.len(), d, "bias width mismatch");
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRowBias(x, bias), rg)
    }

    /// Adds a per-channel bias to an `[N, C, H, W]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.value(x);
        let b = self.value(bias);
        assert_eq!(xs.shape().len(), 4, "add_channel_bias expects NCHW");
        let (c, plane) = (xs.dim(1), xs.dim(2) * xs.dim(3));
        assert_eq!(b.len(), c, "bias channel mismatch");
        let mut out = xs.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
            let bv = b.data()[i % c];
            for o in chunk {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddChannelBias(x, bias), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).map(|x| x.max(eps).ln());
        let rg = self.rg(a);
        self.push(value, Op::LogClamp(a, eps), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean whose value does not depend on the order of the elements:
    /// the terms are accumulated in sorted order.
    pub fn mean_unordered(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut terms = t.data().to_vec();
        terms.sort_by(f64::total_cmp);
        let value = Tensor::scalar(terms.iter().sum::<f64>() / terms.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean over the leading axis: `[n, ...] -> [...]`.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.dim(0);
        let inner: usize = t.shape()[1..].iter().product();
        let mut out = vec![0.0; inner];
        for chunk in t.data().chunks(inner.max(1)) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let shape = t.shape()[1..].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out), Op::MeanAxis0(a), rg)
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            assert_eq!(&s[..axis], &first[..axis], "concat leading dims mismatch");
            assert_eq!(&s[axis + 1..], &first[axis + 1..], "concat trailing dims mismatch");
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let span = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value(input);
        let s = t.shape().to_vec();
        assert!(start + len <= s[axis], "slice out of range");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(input);
        self.push(
            Tensor::new(&shape, data),
            Op::Slice { input, axis, start },
            rg,
        )
    }

    /// Selects rows of an `[n, d]` matrix (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        assert_eq!(t.shape().len(), 2, "gather_rows expects a matrix");
        let d = t.dim(1);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < t.dim(0), "row {r} out of range for table of {}", t.dim(0));
            data.extend_from_slice(t.row(r));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(&[rows.len(), d], data),
            Op::GatherRows(table, rows.to_vec()),
            rg,
        )
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape().len(), 2);
        assert_eq!(bt.shape().len(), 2);
        let (m, k, n) = (at.dim(0), at.dim(1), bt.dim(1));
        assert_eq!(bt.dim(0), k, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, at.data(), false, bt.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transposed();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Row-wise log-softmax of an `[n, m]` matrix.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        let m = t.dim(1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out), Op::LogSoftmaxRows(a), rg)
    }

    /// Picks one column per row: `out[i] = a[i, cols[i]]`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        assert_eq!(t.dim(0), cols.len());
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| t.row(i)[c])
            .collect();
        let rg = self.rg(a);
        self.push(
            Tensor::new(&[cols.len()], data),
            Op::PickPerRow(a, cols.to_vec()),
            rg,
        )
    }

    /// Scales each row of `[n, d]` to unit L2 norm (`x / max(‖x‖, eps)`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        let d = t.dim(1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, out), Op::L2NormalizeRows(a, eps), rg)
    }

    // ---- convolution -------------------------------------------------

    /// 2-d convolution. `input` is `[N, Ci, H, W]`, `weight` is `[Co, Ci, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        assert_eq!(x.shape().len(), 4, "conv2d input must be NCHW");
        assert_eq!(w.shape().len(), 4, "conv2d weight must be [Co, Ci, k, k]");
        let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (co, k) = (w.dim(0), w.dim(2));
        assert_eq!(w.dim(1), ci, "conv2d channel mismatch");
        assert_eq!(w.dim(3), k, "conv2d kernel must be square");
        let geom = ConvGeometry {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
        };
        assert!(geom.is_valid(), "conv2d geometry {geom:?} invalid");
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (rows, plane) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * co * plane];
        let mut saved = Vec::with_capacity(n);
        for b in 0..n {
            let mut cols = vec![0.0; rows * plane];
            im2col(&x.data()[b * ci * h * wd..(b + 1) * ci * h * wd], &geom, &mut cols);
            gemm(
                co,
                rows,
                plane,
                1.0,
                w.data(),
                false,
                &cols,
                false,
                0.0,
                &mut out[b * co * plane..(b + 1) * co * plane],
            );
            saved.push(cols);
        }
        let rg = self.rg(input) || self.rg(weight);
        self.push(
            Tensor::new(&[n, co, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                geom,
                cols: saved,
            },
            rg,
        )
    }

    /// Transposed 2-d convolution (the adjoint of [`Tape::conv2d`]).
    /// `input` is `[N, Ci, H, W]`, `weight` is `[Ci, Co, k, k]`; the output
    /// is `[N, Co, (H−1)·s − 2p + k, (W−1)·s − 2p + k]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        assert_eq!(x.shape().len(), 4, "conv_transpose2d input must be NCHW");
        let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert_eq!(w.dim(0), ci, "conv_transpose2d channel mismatch");
        let (co, k) = (w.dim(1), w.dim(2));
        let ho = (h - 1) * stride + k - 2 * padding;
        let wo = (wd - 1) * stride + k - 2 * padding;
        let out_geom = ConvGeometry {
            channels: co,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            padding,
        };
        assert_eq!(out_geom.out_height(), h, "conv_transpose2d geometry mismatch");
        assert_eq!(out_geom.out_width(), wd, "conv_transpose2d geometry mismatch");
        let rows = out_geom.col_rows();
        let plane = h * wd;
        let mut out = vec![0.0; n * co * ho * wo];
        let mut cols = vec![0.0; rows * plane];
        for b in 0..n {
            gemm(
                rows,
                ci,
                plane,
                1.0,
                w.data(),
                true,
                &x.data()[b * ci * plane..(b + 1) * ci * plane],
                false,
                0.0,
                &mut cols,
            );
            col2im(
                &cols,
                &out_geom,
                &mut out[b * co * ho * wo..(b + 1) * co * ho * wo],
            );
        }
        let rg = self.rg(input) || self.rg(weight);
        self.push(
            Tensor::new(&[n, co, ho, wo], out),
            Op::ConvTranspose2d {
                input,
                weight,
                out_geom,
            },
            rg,
        )
    }

    /// Records an externally defined operation with a precomputed output.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from a single-element `root`. Gradients from any
    /// earlier call are discarded.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar, got {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.shape(root).to_vec();
        grads[root.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let d = g.dim(1);
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d.max(1)) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, Tensor::new(&shape, gb));
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let c = g.dim(1);
                    let plane = g.dim(2) * g.dim(3);
                    let mut gb = vec![0.0; c];
                    for (j, chunk) in g.data().chunks(plane.max(1)).enumerate() {
                        gb[j % c] += chunk.iter().sum::<f64>();
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, Tensor::new(&shape, gb));
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.dim(0), at.dim(1), bt.dim(1));
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, bt.data(), true, 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, at.data(), true, g.data(), false, 0.0, &mut gb);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transposed()),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let s = *slope;
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { s * gv }),
                );
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gv, y| gv * (1.0 - y * y)));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y)),
            Op::LogClamp(a, eps) => {
                let x = self.value(*a);
                let e = *eps;
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |gv, xv| if xv > e { gv / xv } else { 0.0 }),
                );
            }
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| 2.0 * gv * xv));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(&shape, g.item() / n));
            }
            Op::MeanAxis0(a) => {
                let shape = self.shape(*a).to_vec();
                let n = shape[0];
                let inner = g.len();
                let mut ga = Vec::with_capacity(n * inner);
                for _ in 0..n {
                    ga.extend(g.data().iter().map(|v| v / n as f64));
                }
                self.accumulate(grads, *a, Tensor::new(&shape, ga));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape));
            }
            Op::Concat { parts, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let span = ps[*axis] * inner;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * span);
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            gp.extend_from_slice(&g.data()[base..base + span]);
                        }
                        self.accumulate(grads, p, Tensor::new(&ps, gp));
                    }
                    offset += span;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.dim(*axis);
                let mut gi = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(&s, gi));
            }
            Op::GatherRows(table, rows) => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut gt = vec![0.0; s[0] * d];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in gt[r * d..(r + 1) * d].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(&s, gt));
            }
            Op::LogSoftmaxRows(a) => {
                let m = out.dim(1);
                let mut ga = g.data().to_vec();
                for (row_g, row_y) in ga.chunks_mut(m.max(1)).zip(out.data().chunks(m.max(1))) {
                    let total: f64 = row_g.iter().sum();
                    for (gv, y) in row_g.iter_mut().zip(row_y) {
                        *gv -= y.exp() * total;
                    }
                }
                let shape = out.shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(&shape, ga));
            }
            Op::PickPerRow(a, cols) => {
                let s = self.shape(*a).to_vec();
                let mut ga = vec![0.0; s[0] * s[1]];
                for (i, &c) in cols.iter().enumerate() {
                    ga[i * s[1] + c] = g.data()[i];
                }
                self.accumulate(grads, *a, Tensor::new(&s, ga));
            }
            Op::L2NormalizeRows(a, eps) => {
                let x = self.value(*a);
                let d = x.dim(1);
                let mut ga = vec![0.0; x.len()];
                for r in 0..x.dim(0) {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dst = &mut ga[r * d..(r + 1) * d];
                    if norm <= *eps {
                        for (o, gv) in dst.iter_mut().zip(gr) {
                            *o = gv / eps;
                        }
                    } else {
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] = gr[j] / norm - xr[j] * dot / (norm * norm * norm);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape(), ga));
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let w = self.value(*weight);
                let co = w.dim(0);
                let rows = geom.col_rows();
                let plane = geom.col_cols();
                let n = cols.len();
                let in_sz = geom.channels * geom.height * geom.width;
                if self.rg(*weight) {
                    let mut gw = vec![0.0; co * rows];
                    for (b, col) in cols.iter().enumerate() {
                        gemm(
                            co,
                            plane,
                            rows,
                            1.0,
                            &g.data()[b * co * plane..(b + 1) * co * plane],
                            false,
                            col,
                            true,
                            1.0,
                            &mut gw,
                        );
                    }
                    self.accumulate(grads, *weight, Tensor::new(w.shape(), gw));
                }
                if self.rg(*input) {
                    let mut gx = vec![0.0; n * in_sz];
                    let mut gcols = vec![0.0; rows * plane];
                    for b in 0..n {
                        gemm(
                            rows,
                            co,
                            plane,
                            1.0,
                            w.data(),
                            true,
                            &g.data()[b * co * plane..(b + 1) * co * plane],
                            false,
                            0.0,
                            &mut gcols,
                        );
                        col2im(&gcols, geom, &mut gx[b * in_sz..(b + 1) * in_sz]);
                    }
                    let shape = self.shape(*input).to_vec();
                    self.accumulate(grads, *input, Tensor::new(&shape, gx));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                out_geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, ci) = (x.dim(0), x.dim(1));
                let plane = x.dim(2) * x.dim(3);
                let rows = out_geom.col_rows();
                let out_sz = out_geom.channels * out_geom.height * out_geom.width;
                let mut gcols = vec![0.0; rows * plane];
                let mut gx = vec![0.0; n * ci * plane];
                let mut gw = vec![0.0; ci * rows];
                for b in 0..n {
                    im2col(&g.data()[b * out_sz..(b + 1) * out_sz], out_geom, &mut gcols);
                    if self.rg(*input) {
                        gemm(
                            ci,
                            rows,
                            plane,
                            1.0,
                            w.data(),
                            false,
                            &gcols,
                            false,
                            0.0,
                            &mut gx[b * ci * plane..(b + 1) * ci * plane],
                        );
                    }
                    if self.rg(*weight) {
                        gemm(
                            ci,
                            plane,
                            rows,
                            1.0,
                            &x.data()[b * ci * plane..(b + 1) * ci * plane],
                            false,
                            &gcols,
                            true,
                            1.0,
                            &mut gw,
                        );
                    }
                }
                if self.rg(*input) {
                    self.accumulate(grads, *input, Tensor::new(x.shape(), gx));
                }
                if self.rg(*weight) {
                    self.accumulate(grads, *weight, Tensor::new(w.shape(), gw));
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, out, g);
                assert_eq!(gs.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, v, gi);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference check helpers, shared by unit and
/// acceptance tests.
pub mod gradcheck {
    use super::*;

    /// Largest relative error between the analytic gradient of `f` with
    /// respect to `inputs[which]` and central differences with step `h`.
    ///
    /// `f` must build a scalar on the tape from the given input vars.
    /// Relative error is `|a − n| / max(|a| + |n|, floor)` so that
    /// entries with vanishing gradients do not dominate.
    pub fn max_rel_error<F>(inputs: &[Tensor], which: usize, h: f64, f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out);
        let analytic = tape
            .grad(vars[which])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));

        let mut worst: f64 = 0.0;
        let mut probe = inputs.to_vec();
        for idx in 0..inputs[which].len() {
            let orig = inputs[which].data()[idx];
            probe[which].data_mut()[idx] = orig + h;
            let plus = eval(&probe);
            probe[which].data_mut()[idx] = orig - h;
            let minus = eval(&probe);
            probe[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_bias_and_activations_match_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 5], 1.0, &mut r);
        let b = Tensor::randn(&[5], 1.0, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row_bias(h, v[2]);
            let a = t.sigmoid(h);
            let c = t.tanh(h);
            let d = t.mul(a, c);
            let e = t.leaky_relu(d, 0.2);
            let s = t.square(e);
            t.mean(s)
        };
        for which in 0..3 {
            let err = max_rel_error(&[x.clone(), w.clone(), b.clone()], which, 1e-6, f);
            assert!(err < 1e-6, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn softmax_normalize_pick_match_finite_differences() {
        let mut r = rng();
        let q = Tensor::randn(&[4, 3], 1.0, &mut r);
        let k = Tensor::randn(&[4, 3], 1.0, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let qn = t.l2_normalize_rows(v[0], 1e-12);
            let kn = t.l2_normalize_rows(v[1], 1e-12);
            let kt = t.transpose(kn);
            let logits = t.matmul(qn, kt);
            let logits = t.scale(logits, 1.0 / 0.07);
            let ls = t.log_softmax_rows(logits);
            let picked = t.pick_per_row(ls, &[0, 1, 2, 3]);
            let m = t.mean(picked);
            t.scale(m, -1.0)
        };
        for which in 0..2 {
            let err = max_rel_error(&[q.clone(), k.clone()], which, 1e-6, f);
            assert!(err < 1e-6, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn conv_and_transposed_conv_match_finite_differences() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        let wt = Tensor::randn(&[3, 2, 4, 4], 0.5, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let h = t.conv2d(v[0], v[1], 2, 1);
            let h = t.add_channel_bias(h, v[2]);
            let h = t.tanh(h);
            let u = t.conv_transpose2d(h, v[3], 2, 1);
            let u = t.square(u);
            t.sum(u)
        };
        let inputs = [x, w, b, wt];
        for which in 0..4 {
            let err = max_rel_error(&inputs, which, 1e-6, f);
            assert!(err < 1e-5, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn concat_slice_gather_reshape_match_finite_differences() {
        let mut r = rng();
        let a = Tensor::randn(&[2, 3, 2], 1.0, &mut r);
        let b = Tensor::randn(&[2, 1, 2], 1.0, &mut r);
        let table = Tensor::randn(&[4, 3], 1.0, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let c = t.concat(&[v[0], v[1]], 1);
            let s = t.slice(c, 1, 1, 3);
            let s = t.reshape(s, &[2, 6]);
            let m = t.mean_axis0(s);
            let m = t.reshape(m, &[2, 3]);
            let g = t.gather_rows(v[2], &[1, 1, 3]);
            let g = t.slice(g, 0, 0, 2);
            let p = t.mul(m, g);
            let p = t.exp(p);
            let l = t.log_clamped(p, 1e-8);
            let sq = t.square(l);
            t.sum(sq)
        };
        let inputs = [a, b, table];
        for which in 0..3 {
            let err = max_rel_error(&inputs, which, 1e-6, f);
            assert!(err < 1e-6, "input {which}: rel err {err}");
        }
    }

    #[test]
    fn transposed_conv_shape_doubles_with_k4_s2_p1() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = t.constant(Tensor::zeros(&[3, 5, 4, 4]));
        let y = t.conv_transpose2d(x, w, 2, 1);
        assert_eq!(t.shape(y), &[1, 5, 8, 8]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::new(&[2], vec![1.0, 2.0]));
        let p = t.param(Tensor::new(&[2], vec![3.0, 4.0]));
        let m = t.mul(c, p);
        let s = t.sum(m);
        t.backward(s);
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn mean_unordered_is_permutation_invariant() {
        let vals: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1013) as f64 * 1e-3 + 1e10).collect();
        let mut rev = vals.clone();
        rev.reverse();
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[1000], vals));
        let b = t.constant(Tensor::new(&[1000], rev));
        let ma = t.mean_unordered(a);
        let mb = t.mean_unordered(b);
        assert_eq!(t.value(ma).item().to_bits(), t.value(mb).item().to_bits());
    }
}
