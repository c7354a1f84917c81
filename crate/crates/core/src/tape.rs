//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value computed during a forward pass together with
//! the primitive that produced it. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and `backward` is a single
//! reverse sweep. Handles into the tape are plain [`Var`] indices.
//!
//! The primitive set is deliberately coarse: convolution, pooling, the
//! two-sided nonlinearities and the weight-bound computations are single
//! nodes with hand-written adjoints, which keeps the tape short for batched
//! training.

use crate::tensor::{gemm, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise scalar functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Neg,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Abs,
    /// `clamp(x, 0, 1)`; the derivative is 1 on the closed interval.
    Clamp01,
    /// `sqrt(1 - x^2)`; the derivative is taken as 0 where `1 - x^2 <= 0`.
    SqrtOneMinusSq,
    /// `1/sqrt(x)` for `x > 0`, and the constant 1 otherwise.
    RsqrtGuarded,
}

/// Monotone nonexpansive scalar functions usable in a two-sided lift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LiftFn {
    Relu,
    Tanh,
    Sigmoid,
    /// `t * sigmoid(4x / t)` with a per-channel `t > 0`.
    ScaledSigmoid,
}

/// Which Gram matrix attains the minimum in the weight bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramSide {
    /// `W^T W` (columns).
    Inner,
    /// `W W^T` (rows).
    Outer,
}

/// Geometry of a 2-D convolution over `[N, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    /// Zero padding applied before the top row and left column.
    pub pad: [usize; 2],
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel[0] * self.kernel[1]
    }
}

/// Geometry of a pooling layer (no padding; trailing rows/cols that do not
/// fill a window are dropped).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: [usize; 2],
    pub stride: [usize; 2],
    pub out_height: usize,
    pub out_width: usize,
}

/// Axes a mean-centering node averages over (per sample).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CenterAxes {
    /// Across channels at each spatial position (features for 2-D input).
    Channels,
    /// Across spatial positions within each channel.
    Spatial,
    /// Across all non-batch entries.
    All,
}

/// ln(1e-300): floor applied to `log(1 - softmax_label)`.
pub const LOG_FLOOR: f64 = -690.775_527_898_213_7;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddBias(Var, Var),
    MulChannel(Var, Var),
    MatMul(Var, Var),
    Linear(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    Reshape(Var),
    Conv { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    TwoSidedRelu(Var),
    Lift { x: Var, f: LiftFn, t: Option<Var> },
    ScaledSigmoid { x: Var, t: Var },
    NormPool { x: Var, geom: PoolGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanCenter { x: Var, axes: CenterAxes },
    ClipScale(Var),
    Reconverge { x1: Var, fx2: Var, t: Var, s: Var },
    WeightBound { w: Var, side: GramSide, row: usize },
    WeightPenalty { w: Var, side: GramSide },
    RowNormalize(Var),
    RowPenalty(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize> },
    LogOneMinusSoftmax { logits: Var, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph with gradient buffers.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// `(batch, channels, inner)` view of a tensor with at least two axes.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Unary {
    /// The function applied to a single value.
    pub fn apply_scalar(self, x: f64) -> f64 {
        self.apply(x)
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Clamp01 => x.clamp(0.0, 1.0),
            Unary::SqrtOneMinusSq => (1.0 - x * x).max(0.0).sqrt(),
            Unary::RsqrtGuarded => {
                if x > 0.0 {
                    1.0 / x.sqrt()
                } else {
                    1.0
                }
            }
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Neg => -1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Abs => sign(x),
            Unary::Clamp01 => {
                if (0.0..=1.0).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::SqrtOneMinusSq => {
                if y > 0.0 {
                    -x / y
                } else {
                    0.0
                }
            }
            Unary::RsqrtGuarded => {
                if x > 0.0 {
                    -0.5 * y * y * y
                } else {
                    0.0
                }
            }
        }
    }
}

impl LiftFn {
    /// `(f(x), f'(x), df/dt)` for channel parameter `t` (ignored unless scaled).
    fn eval(self, x: f64, t: f64) -> (f64, f64, f64) {
        match self {
            LiftFn::Relu => {
                if x > 0.0 {
                    (x, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            LiftFn::Tanh => {
                let y = x.tanh();
                (y, 1.0 - y * y, 0.0)
            }
            LiftFn::Sigmoid => {
                let y = sigmoid(x);
                (y, y * (1.0 - y), 0.0)
            }
            LiftFn::ScaledSigmoid => scaled_sigmoid_parts(x, t),
        }
    }
}

/// `(t*sigmoid(4x/t), d/dx, d/dt)`.
fn scaled_sigmoid_parts(x: f64, t: f64) -> (f64, f64, f64) {
    let u = 4.0 * x / t;
    let s = sigmoid(u);
    let ds = s * (1.0 - s);
    (t * s, 4.0 * ds, s - u * ds)
}

/// Absolute row sums of `W^T W` (`Inner`) or `W W^T` (`Outer`), plus the Gram matrix.
pub(crate) fn gram_row_sums(w: &[f64], rows: usize, cols: usize, side: GramSide) -> (Vec<f64>, Vec<f64>) {
    let n = match side {
        GramSide::Inner => cols,
        GramSide::Outer => rows,
    };
    let mut g = vec![0.0; n * n];
    match side {
        GramSide::Inner => gemm(cols, rows, cols, w, true, w, false, &mut g, 0.0),
        GramSide::Outer => gemm(rows, cols, rows, w, false, w, true, &mut g, 0.0),
    }
    let sums = g.chunks(n).map(|r| r.iter().map(|v| v.abs()).sum()).collect();
    (sums, g)
}

fn matrix_dims(t: &Tensor, op: &'static str) -> TensorResult<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(invalid(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn conv_out_shape(n: usize, filters: usize, g: &ConvGeom) -> Vec<usize> {
    vec![n, filters, g.out_height, g.out_width]
}

fn im2col(x: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let rows = n * g.out_height * g.out_width;
    let mut cols = vec![0.0; rows * plen];
    let img = g.channels * g.height * g.width;
    for b in 0..n {
        let xb = &x[b * img..(b + 1) * img];
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = (b * g.out_height + oy) * g.out_width + ox;
                let dst = &mut cols[row * plen..(row + 1) * plen];
                let mut p = 0;
                for c in 0..g.channels {
                    for ky in 0..g.kernel[0] {
                        let iy = (oy * g.stride[0] + ky) as isize - g.pad[0] as isize;
                        for kx in 0..g.kernel[1] {
                            let ix = (ox * g.stride[1] + kx) as isize - g.pad[1] as isize;
                            if iy >= 0 && (iy as usize) < g.height && ix >= 0 && (ix as usize) < g.width {
                                dst[p] = xb[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                            p += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], n: usize, g: &ConvGeom, dx: &mut [f64]) {
    let plen = g.patch_len();
    let img = g.channels * g.height * g.width;
    for b in 0..n {
        let xb = &mut dx[b * img..(b + 1) * img];
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = (b * g.out_height + oy) * g.out_width + ox;
                let src = &dcols[row * plen..(row + 1) * plen];
                let mut p = 0;
                for c in 0..g.channels {
                    for ky in 0..g.kernel[0] {
                        let iy = (oy * g.stride[0] + ky) as isize - g.pad[0] as isize;
                        for kx in 0..g.kernel[1] {
                            let ix = (ox * g.stride[1] + kx) as isize - g.pad[1] as isize;
                            if iy >= 0 && (iy as usize) < g.height && ix >= 0 && (ix as usize) < g.width {
                                xb[(c * g.height + iy as usize) * g.width + ix as usize] += src[p];
                            }
                            p += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(sample_offset_of_window_start, window_element_offsets)` style
/// iteration: for every output cell, yields `(out_index, input_indices)`.
fn for_each_window(n: usize, g: &PoolGeom, mut f: impl FnMut(usize, &[usize])) {
    let mut idx = Vec::with_capacity(g.window[0] * g.window[1]);
    let mut out = 0;
    for b in 0..n {
        for c in 0..g.channels {
            let base = (b * g.channels + c) * g.height * g.width;
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    idx.clear();
                    for ky in 0..g.window[0] {
                        for kx in 0..g.window[1] {
                            let iy = oy * g.stride[0] + ky;
                            let ix = ox * g.stride[1] + kx;
                            idx.push(base + iy * g.width + ix);
                        }
                    }
                    f(out, &idx);
                    out += 1;
                }
            }
        }
    }
}

/// Subtracts group means in place; used for both the forward map and its
/// (self-adjoint) backward map.
fn center_in_place(data: &mut [f64], shape: &[usize], axes: CenterAxes) {
    let (n, c, inner) = channel_layout(shape);
    let per = c * inner;
    for b in 0..n {
        let s = &mut data[b * per..(b + 1) * per];
        match axes {
            CenterAxes::All => {
                let m = s.iter().sum::<f64>() / per as f64;
                s.iter_mut().for_each(|v| *v -= m);
            }
            CenterAxes::Spatial => {
                for ch in s.chunks_mut(inner) {
                    let m = ch.iter().sum::<f64>() / inner as f64;
                    ch.iter_mut().for_each(|v| *v -= m);
                }
            }
            CenterAxes::Channels => {
                for p in 0..inner {
                    let m = (0..c).map(|k| s[k * inner + p]).sum::<f64>() / c as f64;
                    for k in 0..c {
                        s[k * inner + p] -= m;
                    }
                }
            }
        }
    }
}

/// Per-sample `(log(1 - softmax_label), gradient wrt logits)`.
fn log_one_minus_softmax_row(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    let others = total - exps[label];
    // Recompute the complement sum directly to avoid cancellation.
    let others_direct: f64 = exps.iter().enumerate().filter(|&(j, _)| j != label).map(|(_, v)| v).sum();
    let others = if others_direct > 0.0 { others_direct } else { others };
    let value = others.ln() - total.ln();
    let mut grad = vec![0.0; z.len()];
    if value.is_finite() && value > LOG_FLOOR {
        for j in 0..z.len() {
            let p = exps[j] / total;
            grad[j] = if j == label { -p } else { exps[j] / others - p };
        }
        (value, grad)
    } else {
        (LOG_FLOOR, grad)
    }
}

fn softmax_ce_row(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    let value = total.ln() + mx - z[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    (value, grad)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
        }
    }

    /// A tape that evaluates values only; `backward` is unavailable.
    pub fn without_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies `v`'s value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> TensorResult<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(op_name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> TensorResult<Var> {
        let sv = &self.nodes[s.0].value;
        if !sv.is_scalar() {
            return Err(invalid("mul_scalar", format!("factor has shape {:?}", sv.shape())));
        }
        let k = sv.item();
        let out = self.nodes[x.0].value.map(|v| v * k);
        Ok(self.push(out, Op::MulScalar(x, s)))
    }

    fn check_channel_vec(&self, x: Var, p: Var, op: &'static str) -> TensorResult<()> {
        let xs = self.shape(x);
        let ps = self.shape(p);
        if xs.len() < 2 || ps.len() != 1 || ps[0] != xs[1] {
            return Err(mismatch(op, xs, ps));
        }
        Ok(())
    }

    /// Adds a per-channel (axis 1) bias vector.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        self.check_channel_vec(x, bias, "add_bias")?;
        let xv = &self.nodes[x.0].value;
        let (n, c, inner) = channel_layout(xv.shape());
        let b = self.nodes[bias.0].value.data();
        let mut out = xv.clone();
        let d = out.data_mut();
        for s in 0..n {
            for k in 0..c {
                let off = (s * c + k) * inner;
                d[off..off + inner].iter_mut().for_each(|v| *v += b[k]);
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Multiplies each channel (axis 1) by its own factor.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> TensorResult<Var> {
        self.check_channel_vec(x, scale, "mul_channel")?;
        let xv = &self.nodes[x.0].value;
        let (n, c, inner) = channel_layout(xv.shape());
        let f = self.nodes[scale.0].value.data();
        let mut out = xv.clone();
        let d = out.data_mut();
        for s in 0..n {
            for k in 0..c {
                let off = (s * c + k) * inner;
                d[off..off + inner].iter_mut().for_each(|v| *v *= f[k]);
            }
        }
        Ok(self.push(out, Op::MulChannel(x, scale)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x W^T` for `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> TensorResult<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(mismatch("linear", xv.shape(), wv.shape()));
        }
        let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, xv.data(), false, wv.data(), true, &mut out, 0.0);
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::Linear(x, w)))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.nodes[x.0].value.map(|v| f.apply(v));
        self.push(out, Op::Unary(x, f))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let v = self.nodes[x.0].value.clone();
        let from = v.shape().to_vec();
        let out = v.reshape(shape).map_err(|_| mismatch("reshape", &from, shape))?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Patch-matrix convolution: `x: [N, C, H, W]`, `w: [F, C*KH*KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> TensorResult<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let xs = xv.shape();
        if xs.len() != 4 || xs[1] != geom.channels || xs[2] != geom.height || xs[3] != geom.width {
            return Err(mismatch("conv2d", xs, &[geom.channels, geom.height, geom.width]));
        }
        let (f, plen) = matrix_dims(wv, "conv2d")?;
        if plen != geom.patch_len() {
            return Err(mismatch("conv2d", wv.shape(), &[f, geom.patch_len()]));
        }
        let n = xs[0];
        let cols = im2col(xv.data(), n, &geom);
        let rows = n * geom.out_height * geom.out_width;
        let mut mat = vec![0.0; rows * f];
        gemm(rows, plen, f, &cols, false, wv.data(), true, &mut mat, 0.0);
        let hw = geom.out_height * geom.out_width;
        let mut out = vec![0.0; rows * f];
        for b in 0..n {
            for p in 0..hw {
                let src = &mat[(b * hw + p) * f..(b * hw + p + 1) * f];
                for (k, v) in src.iter().enumerate() {
                    out[(b * f + k) * hw + p] = *v;
                }
            }
        }
        let out = Tensor::new(conv_out_shape(n, f, &geom), out)?;
        let cols = if self.record { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv { x, w, geom, cols }))
    }

    /// `[relu(x), relu(-x)]` concatenated along axis 1.
    pub fn two_sided_relu(&mut self, x: Var) -> TensorResult<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() < 2 {
            return Err(invalid("two_sided_relu", "needs a batch axis and a channel axis"));
        }
        let (n, c, inner) = channel_layout(xv.shape());
        let per = c * inner;
        let mut out = Vec::with_capacity(2 * n * per);
        for s in 0..n {
            let row = &xv.data()[s * per..(s + 1) * per];
            out.extend(row.iter().map(|v| v.max(0.0)));
            out.extend(row.iter().map(|v| (-v).max(0.0)));
        }
        let mut shape = xv.shape().to_vec();
        shape[1] *= 2;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::TwoSidedRelu(x)))
    }

    /// `[f(x), f(x) - x]` concatenated along axis 1. `t` (per channel, positive)
    /// is required for [`LiftFn::ScaledSigmoid`] and ignored otherwise.
    pub fn two_sided_lift(&mut self, x: Var, f: LiftFn, t: Option<Var>) -> TensorResult<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() < 2 {
            return Err(invalid("two_sided_lift", "needs a batch axis and a channel axis"));
        }
        let t = match (f, t) {
            (LiftFn::ScaledSigmoid, Some(t)) => {
                self.check_channel_vec(x, t, "two_sided_lift")?;
                Some(t)
            }
            (LiftFn::ScaledSigmoid, None) => return Err(invalid("two_sided_lift", "scaled sigmoid needs t")),
            _ => None,
        };
        let xv = &self.nodes[x.0].value;
        let tv = t.map(|t| self.nodes[t.0].value.data());
        let (n, c, inner) = channel_layout(xv.shape());
        let per = c * inner;
        let mut out = vec![0.0; 2 * n * per];
        for s in 0..n {
            for k in 0..c {
                let tk = tv.map_or(1.0, |t| t[k]);
                for p in 0..inner {
                    let i = k * inner + p;
                    let xi = xv.data()[s * per + i];
                    let (y, _, _) = f.eval(xi, tk);
                    out[2 * s * per + i] = y;
                    out[2 * s * per + per + i] = y - xi;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[1] *= 2;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Lift { x, f, t }))
    }

    /// `t * sigmoid(4x / t)` with per-channel `t > 0`.
    pub fn scaled_sigmoid(&mut self, x: Var, t: Var) -> TensorResult<Var> {
        self.check_channel_vec(x, t, "scaled_sigmoid")?;
        let xv = &self.nodes[x.0].value;
        let tv = self.nodes[t.0].value.data();
        let (n, c, inner) = channel_layout(xv.shape());
        let mut out = xv.clone();
        let d = out.data_mut();
        for s in 0..n {
            for k in 0..c {
                let off = (s * c + k) * inner;
                for v in &mut d[off..off + inner] {
                    *v = scaled_sigmoid_parts(*v, tv[k]).0;
                }
            }
        }
        Ok(self.push(out, Op::ScaledSigmoid { x, t }))
    }

    fn check_pool(&self, x: Var, g: &PoolGeom, op: &'static str) -> TensorResult<usize> {
        let xs = self.shape(x);
        if xs.len() != 4 || xs[1] != g.channels || xs[2] != g.height || xs[3] != g.width {
            return Err(mismatch(op, xs, &[g.channels, g.height, g.width]));
        }
        Ok(xs[0])
    }

    /// L2 norm of every pooling window.
    pub fn norm_pool(&mut self, x: Var, geom: PoolGeom) -> TensorResult<Var> {
        let n = self.check_pool(x, &geom, "norm_pool")?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * geom.channels * geom.out_height * geom.out_width];
        for_each_window(n, &geom, |o, idx| {
            out[o] = idx.iter().map(|&i| xd[i] * xd[i]).sum::<f64>().sqrt();
        });
        let out = Tensor::new(vec![n, geom.channels, geom.out_height, geom.out_width], out)?;
        Ok(self.push(out, Op::NormPool { x, geom }))
    }

    pub fn max_pool(&mut self, x: Var, geom: PoolGeom) -> TensorResult<Var> {
        let n = self.check_pool(x, &geom, "max_pool")?;
        let xd = self.nodes[x.0].value.data();
        let len = n * geom.channels * geom.out_height * geom.out_width;
        let mut out = vec![0.0; len];
        let mut argmax = vec![0; len];
        for_each_window(n, &geom, |o, idx| {
            let mut best = idx[0];
            for &i in &idx[1..] {
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            out[o] = xd[best];
            argmax[o] = best;
        });
        let out = Tensor::new(vec![n, geom.channels, geom.out_height, geom.out_width], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn mean_center(&mut self, x: Var, axes: CenterAxes) -> TensorResult<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() < 2 || (axes == CenterAxes::Spatial && xv.shape().len() < 3) {
            return Err(invalid(
                "mean_center",
                format!("axes {axes:?} do not apply to shape {:?}", xv.shape()),
            ));
        }
        let mut out = xv.clone();
        let shape = out.shape().to_vec();
        center_in_place(out.data_mut(), &shape, axes);
        Ok(self.push(out, Op::MeanCenter { x, axes }))
    }

    /// `s / max|s|` (returned unchanged if `s` is all zero).
    pub fn clip_scale(&mut self, s: Var) -> Var {
        let v = &self.nodes[s.0].value;
        let m = v.data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let out = if m > 0.0 { v.map(|x| x / m) } else { v.clone() };
        self.push(out, Op::ClipScale(s))
    }

    /// `t*x1 + s*fx2` on the first `C = channels(x1)` channels of `fx2`;
    /// remaining channels of `fx2` pass through unscaled.
    pub fn reconverge(&mut self, x1: Var, fx2: Var, t: Var, s: Var) -> TensorResult<Var> {
        let (a, b) = (&self.nodes[x1.0].value, &self.nodes[fx2.0].value);
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] || sb[1] < sa[1] {
            return Err(mismatch("reconverge", sa, sb));
        }
        let (tv, sv) = (&self.nodes[t.0].value, &self.nodes[s.0].value);
        if !tv.is_scalar() || !sv.is_scalar() {
            return Err(invalid("reconverge", "t and s must be scalars"));
        }
        let (tk, sk) = (tv.item(), sv.item());
        let (n, c, inner) = channel_layout(sa);
        let c2 = sb[1];
        let mut out = b.clone();
        let d = out.data_mut();
        for smp in 0..n {
            for i in 0..c * inner {
                let o = smp * c2 * inner + i;
                d[o] = tk * a.data()[smp * c * inner + i] + sk * d[o];
            }
        }
        Ok(self.push(out, Op::Reconverge { x1, fx2, t, s }))
    }

    /// `min(r(W^T W), r(W W^T))` with `r` the maximum absolute row sum.
    pub fn weight_bound(&mut self, w: Var) -> TensorResult<Var> {
        let wv = &self.nodes[w.0].value;
        let (r, c) = matrix_dims(wv, "weight_bound")?;
        let (inner, _) = gram_row_sums(wv.data(), r, c, GramSide::Inner);
        let (outer, _) = gram_row_sums(wv.data(), r, c, GramSide::Outer);
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        };
        let (ri, vi) = argmax(&inner);
        let (ro, vo) = argmax(&outer);
        let (side, row, value) = if vi <= vo {
            (GramSide::Inner, ri, vi)
        } else {
            (GramSide::Outer, ro, vo)
        };
        Ok(self.push(Tensor::scalar(value), Op::WeightBound { w, side, row }))
    }

    /// `min(l(W^T W), l(W W^T))` with `l(M) = sum_i max(sum_j |M_ij| - 1, 0)`.
    pub fn weight_penalty(&mut self, w: Var) -> TensorResult<Var> {
        let wv = &self.nodes[w.0].value;
        let (r, c) = matrix_dims(wv, "weight_penalty")?;
        let hinge = |sums: Vec<f64>| sums.iter().map(|s| (s - 1.0).max(0.0)).sum::<f64>();
        let li = hinge(gram_row_sums(wv.data(), r, c, GramSide::Inner).0);
        let lo = hinge(gram_row_sums(wv.data(), r, c, GramSide::Outer).0);
        let (side, value) = if li <= lo { (GramSide::Inner, li) } else { (GramSide::Outer, lo) };
        Ok(self.push(Tensor::scalar(value), Op::WeightPenalty { w, side }))
    }

    /// Divides every row by its L2 norm (zero rows are left as they are).
    pub fn row_normalize(&mut self, w: Var) -> TensorResult<Var> {
        let wv = &self.nodes[w.0].value;
        let (_, c) = matrix_dims(wv, "row_normalize")?;
        let mut out = wv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let nrm = crate::tensor::l2_norm(row);
            if nrm > 0.0 {
                row.iter_mut().for_each(|v| *v /= nrm);
            }
        }
        Ok(self.push(out, Op::RowNormalize(w)))
    }

    /// Sum over rows of the weight penalty of each row taken as a 1 x n matrix.
    pub fn row_penalty(&mut self, w: Var) -> TensorResult<Var> {
        let wv = &self.nodes[w.0].value;
        let (_, c) = matrix_dims(wv, "row_penalty")?;
        let total = wv.data().chunks(c).map(|row| row_penalty_parts(row).0).sum();
        Ok(self.push(Tensor::scalar(total), Op::RowPenalty(w)))
    }

    fn check_labels(&self, logits: Var, labels: &[usize], op: &'static str) -> TensorResult<(usize, usize)> {
        let (n, k) = matrix_dims(self.value(logits), op)?;
        if labels.len() != n {
            return Err(invalid(op, format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(op, format!("label {bad} out of range for {k} classes")));
        }
        Ok((n, k))
    }

    /// Mean softmax cross-entropy.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> TensorResult<Var> {
        let (n, _) = self.check_labels(logits, labels, "softmax_ce")?;
        let lv = self.value(logits);
        let total: f64 = (0..n).map(|i| softmax_ce_row(lv.row(i), labels[i]).0).sum();
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean of `log(1 - softmax(logits)_label)`, floored at `LOG_FLOOR`.
    pub fn log_one_minus_softmax(&mut self, logits: Var, labels: &[usize]) -> TensorResult<Var> {
        let (n, _) = self.check_labels(logits, labels, "log_one_minus_softmax")?;
        let lv = self.value(logits);
        let total: f64 = (0..n).map(|i| log_one_minus_softmax_row(lv.row(i), labels[i]).0).sum();
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::LogOneMinusSoftmax {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradient of `loss` (a scalar) with respect to every node.
    /// Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        let v = &self.nodes[loss.0].value;
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        self.backward_with_seed(loss, &Tensor::full(v.shape(), 1.0))
    }

    /// Vector-Jacobian product: seeds `output` with `seed` and propagates.
    pub fn backward_with_seed(&mut self, output: Var, seed: &Tensor) -> TensorResult<()> {
        if !self.record {
            return Err(invalid("backward", "tape was created without gradient recording"));
        }
        let shape = self.nodes[output.0].value.shape();
        if shape != seed.shape() {
            return Err(mismatch("backward", shape, seed.shape()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// `d output / d v` after the last backward call (zeros if unreachable).
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::full(&shape, 0.0),
        }
    }

    fn acc(&mut self, v: Var) -> &mut [f64] {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op so node values can be borrowed while
        // gradient buffers are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(self.acc(*a), g, 1.0);
                add_into(self.acc(*b), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(*a), g, 1.0);
                add_into(self.acc(*b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                for ((d, gi), bi) in self.acc(*a).iter_mut().zip(g).zip(&bv) {
                    *d += gi * bi;
                }
                for ((d, gi), ai) in self.acc(*b).iter_mut().zip(g).zip(&av) {
                    *d += gi * ai;
                }
            }
            Op::Scale(a, k) => add_into(self.acc(*a), g, *k),
            Op::MulScalar(x, s) => {
                let k = self.nodes[s.0].value.item();
                let dot: f64 = self.nodes[x.0].value.data().iter().zip(g).map(|(a, b)| a * b).sum();
                add_into(self.acc(*x), g, k);
                self.acc(*s)[0] += dot;
            }
            Op::AddBias(x, b) => {
                add_into(self.acc(*x), g, 1.0);
                let (n, c, inner) = channel_layout(self.nodes[x.0].value.shape());
                let db = self.acc(*b);
                for s in 0..n {
                    for k in 0..c {
                        let off = (s * c + k) * inner;
                        db[k] += g[off..off + inner].iter().sum::<f64>();
                    }
                }
            }
            Op::MulChannel(x, f) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                let fv = self.nodes[f.0].value.data().to_vec();
                let (n, c, inner) = channel_layout(self.nodes[x.0].value.shape());
                let dx = self.acc(*x);
                for s in 0..n {
                    for k in 0..c {
                        let off = (s * c + k) * inner;
                        for j in off..off + inner {
                            dx[j] += g[j] * fv[k];
                        }
                    }
                }
                let df = self.acc(*f);
                for s in 0..n {
                    for k in 0..c {
                        let off = (s * c + k) * inner;
                        df[k] += (off..off + inner).map(|j| g[j] * xv[j]).sum::<f64>();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                gemm(m, n, k, g, false, bv.data(), true, self.acc(*a), 1.0);
                gemm(k, m, n, av.data(), true, g, false, self.acc(*b), 1.0);
            }
            Op::Linear(x, w) => {
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                let (n, k) = (xv.shape()[0], xv.shape()[1]);
                let m = wv.shape()[0];
                gemm(n, m, k, g, false, wv.data(), false, self.acc(*x), 1.0);
                gemm(m, n, k, g, true, xv.data(), false, self.acc(*w), 1.0);
            }
            Op::Unary(x, f) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                let yv = self.nodes[i].value.data().to_vec();
                for (j, d) in self.acc(*x).iter_mut().enumerate() {
                    *d += g[j] * f.derivative(xv[j], yv[j]);
                }
            }
            Op::Sum(x) => {
                let k = g[0];
                self.acc(*x).iter_mut().for_each(|d| *d += k);
            }
            Op::Mean(x) => {
                let k = g[0] / self.nodes[x.0].value.len() as f64;
                self.acc(*x).iter_mut().for_each(|d| *d += k);
            }
            Op::SumSq(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                for (d, v) in self.acc(*x).iter_mut().zip(&xv) {
                    *d += 2.0 * g[0] * v;
                }
            }
            Op::Reshape(x) => add_into(self.acc(*x), g, 1.0),
            Op::Conv { x, w, geom, cols } => {
                let n = self.nodes[x.0].value.shape()[0];
                let wv = self.nodes[w.0].value.clone();
                let f = wv.shape()[0];
                let plen = geom.patch_len();
                let hw = geom.out_height * geom.out_width;
                let rows = n * hw;
                let mut gmat = vec![0.0; rows * f];
                for b in 0..n {
                    for k in 0..f {
                        let src = &g[(b * f + k) * hw..(b * f + k + 1) * hw];
                        for (p, v) in src.iter().enumerate() {
                            gmat[(b * hw + p) * f + k] = *v;
                        }
                    }
                }
                gemm(f, rows, plen, &gmat, true, cols, false, self.acc(*w), 1.0);
                let mut dcols = vec![0.0; rows * plen];
                gemm(rows, f, plen, &gmat, false, wv.data(), false, &mut dcols, 0.0);
                col2im(&dcols, n, geom, self.acc(*x));
            }
            Op::TwoSidedRelu(x) => {
                let xv = self.nodes[x.0].value.clone();
                let (n, c, inner) = channel_layout(xv.shape());
                let per = c * inner;
                let dx = self.acc(*x);
                for s in 0..n {
                    for j in 0..per {
                        let v = xv.data()[s * per + j];
                        if v > 0.0 {
                            dx[s * per + j] += g[2 * s * per + j];
                        } else if v < 0.0 {
                            dx[s * per + j] -= g[2 * s * per + per + j];
                        }
                    }
                }
            }
            Op::Lift { x, f, t } => {
                let xv = self.nodes[x.0].value.clone();
                let tv = t.map(|t| self.nodes[t.0].value.data().to_vec());
                let (n, c, inner) = channel_layout(xv.shape());
                let per = c * inner;
                let mut dt = vec![0.0; c];
                {
                    let dx = self.acc(*x);
                    for s in 0..n {
                        for k in 0..c {
                            let tk = tv.as_ref().map_or(1.0, |t| t[k]);
                            for p in 0..inner {
                                let j = k * inner + p;
                                let (_, dfdx, dfdt) = f.eval(xv.data()[s * per + j], tk);
                                let g1 = g[2 * s * per + j];
                                let g2 = g[2 * s * per + per + j];
                                dx[s * per + j] += dfdx * (g1 + g2) - g2;
                                dt[k] += dfdt * (g1 + g2);
                            }
                        }
                    }
                }
                if let Some(t) = t {
                    add_into(self.acc(*t), &dt, 1.0);
                }
            }
            Op::ScaledSigmoid { x, t } => {
                let xv = self.nodes[x.0].value.clone();
                let tv = self.nodes[t.0].value.data().to_vec();
                let (n, c, inner) = channel_layout(xv.shape());
                let mut dt = vec![0.0; c];
                {
                    let dx = self.acc(*x);
                    for s in 0..n {
                        for k in 0..c {
                            let off = (s * c + k) * inner;
                            for j in off..off + inner {
                                let (_, dfdx, dfdt) = scaled_sigmoid_parts(xv.data()[j], tv[k]);
                                dx[j] += g[j] * dfdx;
                                dt[k] += g[j] * dfdt;
                            }
                        }
                    }
                }
                add_into(self.acc(*t), &dt, 1.0);
            }
            Op::NormPool { x, geom } => {
                let xv = self.nodes[x.0].value.clone();
                let yv = self.nodes[i].value.clone();
                let n = xv.shape()[0];
                let dx = self.acc(*x);
                for_each_window(n, geom, |o, idx| {
                    let y = yv.data()[o];
                    if y > 0.0 {
                        for &j in idx {
                            dx[j] += g[o] * xv.data()[j] / y;
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let dx = self.acc(*x);
                for (o, &j) in argmax.iter().enumerate() {
                    dx[j] += g[o];
                }
            }
            Op::MeanCenter { x, axes } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let mut gc = g.to_vec();
                center_in_place(&mut gc, &shape, *axes);
                add_into(self.acc(*x), &gc, 1.0);
            }
            Op::ClipScale(s) => {
                let sv = self.nodes[s.0].value.data().to_vec();
                let (jm, m) = sv
                    .iter()
                    .enumerate()
                    .fold((0, 0.0f64), |b, (j, v)| if v.abs() > b.1 { (j, v.abs()) } else { b });
                let ds = self.acc(*s);
                if m > 0.0 {
                    let dot: f64 = g.iter().zip(&sv).map(|(a, b)| a * b).sum();
                    for (d, gi) in ds.iter_mut().zip(g) {
                        *d += gi / m;
                    }
                    ds[jm] -= dot * sign(sv[jm]) / (m * m);
                } else {
                    add_into(ds, g, 1.0);
                }
            }
            Op::Reconverge { x1, fx2, t, s } => {
                let a = self.nodes[x1.0].value.clone();
                let b = self.nodes[fx2.0].value.clone();
                let (tk, sk) = (self.nodes[t.0].value.item(), self.nodes[s.0].value.item());
                let (n, c, inner) = channel_layout(a.shape());
                let c2 = b.shape()[1];
                let (mut dt, mut ds) = (0.0, 0.0);
                {
                    let da = self.acc(*x1);
                    for smp in 0..n {
                        for j in 0..c * inner {
                            let o = smp * c2 * inner + j;
                            da[smp * c * inner + j] += tk * g[o];
                            dt += g[o] * a.data()[smp * c * inner + j];
                            ds += g[o] * b.data()[o];
                        }
                    }
                }
                let db = self.acc(*fx2);
                for smp in 0..n {
                    for j in 0..c2 * inner {
                        let o = smp * c2 * inner + j;
                        db[o] += if j < c * inner { sk * g[o] } else { g[o] };
                    }
                }
                self.acc(*t)[0] += dt;
                self.acc(*s)[0] += ds;
            }
            Op::WeightBound { w, side, row } => {
                let wv = self.nodes[w.0].value.clone();
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                let wd = wv.data();
                let k = g[0];
                let dw = self.acc(*w);
                match side {
                    GramSide::Inner => {
                        // signs of row `row` of W^T W
                        let r = *row;
                        let s: Vec<f64> = (0..n).map(|j| sign((0..m).map(|q| wd[q * n + r] * wd[q * n + j]).sum())).collect();
                        for q in 0..m {
                            let wr = wd[q * n + r];
                            let ws: f64 = (0..n).map(|j| wd[q * n + j] * s[j]).sum();
                            for j in 0..n {
                                dw[q * n + j] += k * wr * s[j];
                            }
                            dw[q * n + r] += k * ws;
                        }
                    }
                    GramSide::Outer => {
                        let r = *row;
                        let s: Vec<f64> = (0..m).map(|q| sign((0..n).map(|j| wd[r * n + j] * wd[q * n + j]).sum())).collect();
                        for j in 0..n {
                            let sw: f64 = (0..m).map(|q| s[q] * wd[q * n + j]).sum();
                            dw[r * n + j] += k * sw;
                        }
                        for q in 0..m {
                            if s[q] != 0.0 {
                                for j in 0..n {
                                    dw[q * n + j] += k * s[q] * wd[r * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::WeightPenalty { w, side } => {
                let wv = self.nodes[w.0].value.clone();
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                let (sums, gram) = gram_row_sums(wv.data(), m, n, *side);
                let dim = sums.len();
                // G: sign pattern of the active (hinge > 0) rows, then G + G^T.
                let mut gsym = vec![0.0; dim * dim];
                for (r, s) in sums.iter().enumerate() {
                    if *s > 1.0 {
                        for j in 0..dim {
                            let v = sign(gram[r * dim + j]) * g[0];
                            gsym[r * dim + j] += v;
                            gsym[j * dim + r] += v;
                        }
                    }
                }
                let dw = self.acc(*w);
                match side {
                    GramSide::Inner => gemm(m, n, n, wv.data(), false, &gsym, false, dw, 1.0),
                    GramSide::Outer => gemm(m, m, n, &gsym, false, wv.data(), false, dw, 1.0),
                }
            }
            Op::RowNormalize(w) => {
                let wv = self.nodes[w.0].value.clone();
                let yv = self.nodes[i].value.clone();
                let c = wv.shape()[1];
                let dw = self.acc(*w);
                for (r, (wr, yr)) in wv.data().chunks(c).zip(yv.data().chunks(c)).enumerate() {
                    let nrm = crate::tensor::l2_norm(wr);
                    let gr = &g[r * c..(r + 1) * c];
                    if nrm > 0.0 {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dw[r * c + j] += (gr[j] - yr[j] * dot) / nrm;
                        }
                    } else {
                        add_into(&mut dw[r * c..(r + 1) * c], gr, 1.0);
                    }
                }
            }
            Op::RowPenalty(w) => {
                let wv = self.nodes[w.0].value.clone();
                let c = wv.shape()[1];
                let dw = self.acc(*w);
                for (r, row) in wv.data().chunks(c).enumerate() {
                    let (_, gr) = row_penalty_parts(row);
                    add_into(&mut dw[r * c..(r + 1) * c], &gr, g[0]);
                }
            }
            Op::SoftmaxCe { logits, labels } => {
                let lv = self.nodes[logits.0].value.clone();
                let n = labels.len();
                let k = lv.shape()[1];
                let dl = self.acc(*logits);
                for (s, &y) in labels.iter().enumerate() {
                    let (_, gr) = softmax_ce_row(lv.row(s), y);
                    add_into(&mut dl[s * k..(s + 1) * k], &gr, g[0] / n as f64);
                }
            }
            Op::LogOneMinusSoftmax { logits, labels } => {
                let lv = self.nodes[logits.0].value.clone();
                let n = labels.len();
                let k = lv.shape()[1];
                let dl = self.acc(*logits);
                for (s, &y) in labels.iter().enumerate() {
                    let (_, gr) = log_one_minus_softmax_row(lv.row(s), y);
                    add_into(&mut dl[s * k..(s + 1) * k], &gr, g[0] / n as f64);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Penalty of one row `w` viewed as a `1 x n` matrix, and its gradient.
fn row_penalty_parts(w: &[f64]) -> (f64, Vec<f64>) {
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let sq: f64 = w.iter().map(|v| v * v).sum();
    let outer = (sq - 1.0).max(0.0);
    let inner: f64 = w.iter().map(|v| (v.abs() * l1 - 1.0).max(0.0)).sum();
    if inner <= outer {
        let active: f64 = w.iter().filter(|v| v.abs() * l1 > 1.0).map(|v| v.abs()).sum();
        let grad = w
            .iter()
            .map(|&v| {
                let own = if v.abs() * l1 > 1.0 { l1 } else { 0.0 };
                sign(v) * (own + active)
            })
            .collect();
        (inner, grad)
    } else {
        let k = if sq > 1.0 { 2.0 } else { 0.0 };
        (outer, w.iter().map(|v| k * v).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let z = tape.leaf(Tensor::vector(vec![0.0; 3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 1]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn linear_gradient_is_input() {
        // loss = sum(w * x) => dloss/dw = x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let w = tape.leaf(Tensor::vector(vec![3.0, 1.0, -4.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), tape.value(x).data());
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.leaf(Tensor::scalar(7.0));
        tape.backward(c).unwrap();
        assert!(tape.grad(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_overwrites() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let s = tape.sum_sq(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_kink_gradient_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let y = tape.unary(x, Unary::Relu);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0]);
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut tape = Tape::without_grad();
        let x = tape.leaf(Tensor::scalar(1.0));
        assert!(tape.backward(x).is_err());
    }
}
