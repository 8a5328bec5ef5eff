//! The operation tape: eager forward evaluation, recorded for reverse replay.

use super::kernels::{col2im, im2col, matmul_into, transpose_into};
use super::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, S),
    Sigmoid(Var),
    Log1p(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Reshape(Var),
    Concat { axis: usize, inputs: Vec<Var> },
    SelectRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    SumAll(Var),
    MeanAll(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    by_var: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.by_var.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Wengert list of tensor operations.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of `v`.
    pub fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant input: no gradient flows into it.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf_grad(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf with explicit gradient flag.
    pub fn leaf_flagged(&mut self, t: Tensor<S>, needs_grad: bool) -> Var {
        self.push(t, Op::Leaf, needs_grad)
    }

    // ── Elementwise binary (broadcast over size-1 axes, same rank) ─────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_bin(self.val(a), self.val(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_bin(self.val(a), self.val(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_bin(self.val(a), self.val(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_bin(self.val(a), self.val(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::ZERO; m * n];
        matmul_into(&av.data, &bv.data, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![S::ZERO; m * n];
        transpose_into(&av.data, &mut out, m, n);
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[n, m], out), Op::Transpose(a), ng)
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x.maxs(S::ZERO));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let v = self.map_unary(a, |x| if x > S::ZERO { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, sigmoid_stable);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x.ln_1p());
        let ng = self.ng(a);
        self.push(v, Op::Log1p(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x.exp());
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x.ln());
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x.sqrt());
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map_unary(a, |x| x.abs());
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.map_unary(a, |x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let v = self.map_unary(a, |x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a, c), ng)
    }

    fn map_unary(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let av = self.val(a);
        Tensor { shape: av.shape.clone(), data: av.data.iter().map(|&x| f(x)).collect() }
    }

    // ── Row-wise normalizers (2-D, last axis) ───────────────────────────

    /// Softmax over each row, with the max subtracted before exponentiation.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            let row = &av.data[i * c..(i + 1) * c];
            let m = row.iter().fold(row[0], |acc, &x| acc.maxs(x));
            let mut sum = S::ZERO;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[r, c], out), Op::Softmax(a), ng)
    }

    /// Log-softmax over each row.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            let row = &av.data[i * c..(i + 1) * c];
            let m = row.iter().fold(row[0], |acc, &x| acc.maxs(x));
            let mut sum = S::ZERO;
            for j in 0..c {
                sum = sum + (row[j] - m).exp();
            }
            let lse = m + sum.ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[r, c], out), Op::LogSoftmax(a), ng)
    }

    /// Layer normalization over the last axis of a 2-D input, with learned
    /// per-channel gain and bias (both 1-D of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert_eq!(self.val(gain).numel(), c, "layer_norm gain length");
        assert_eq!(self.val(bias).numel(), c, "layer_norm bias length");
        let mut out = vec![S::ZERO; r * c];
        let eps = S::from_f64(LN_EPS);
        let inv_c = S::from_f64(1.0 / c as f64);
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let mut mean = S::ZERO;
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_c;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_c;
            let inv_std = S::ONE / (var + eps).sqrt();
            let g = &self.val(gain).data;
            let b = &self.val(bias).data;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(Tensor::from_vec(&[r, c], out), Op::LayerNorm { x, gain, bias }, ng)
    }

    // ── Convolutions (single image, channels-first) ─────────────────────

    /// Cross-correlation of `x [ci,h,w]` with `w [co,ci,kh,kw]` plus bias
    /// `b [co]`, producing `[co,ho,wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.val(x).shape.clone(), self.val(w).shape.clone());
        assert_eq!(xs.len(), 3, "conv2d input must be [c,h,w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [co,ci,kh,kw]");
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, ci2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert_eq!(self.val(b).numel(), co, "conv2d bias length");
        assert!(h + 2 * pad >= kh, "conv2d height {h}");
        assert!(wd + 2 * pad >= kw, "conv2d width {wd}");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;

        let cols = im2col(&self.val(x).data, ci, h, wd, kh, kw, stride, pad, ho, wo);
        let mut out = vec![S::ZERO; co * ho * wo];
        matmul_into(&self.val(w).data, &cols, &mut out, co, ci * kh * kw, ho * wo);
        let bv = &self.val(b).data;
        for (c, chunk) in out.chunks_mut(ho * wo).enumerate() {
            for v in chunk {
                *v = *v + bv[c];
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::from_vec(&[co, ho, wo], out), Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Transposed convolution (the adjoint map of [`Tape::conv2d`] with the
    /// same stride and padding): `x [ci,h,w]`, `w [ci,co,kh,kw]`, `b [co]`,
    /// producing `[co,(h-1)*stride-2*pad+kh,(w-1)*stride-2*pad+kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.val(x).shape.clone(), self.val(w).shape.clone());
        assert_eq!(xs.len(), 3, "conv_transpose2d input must be [c,h,w]");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be [ci,co,kh,kw]");
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (ci2, co, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, ci2, "conv_transpose2d channel mismatch");
        assert_eq!(self.val(b).numel(), co, "conv_transpose2d bias length");
        let ho = (h - 1) * stride + kh - 2 * pad;
        let wo = (wd - 1) * stride + kw - 2 * pad;

        // y = col2im(w2^T x2): each input pixel stamps a kh*kw patch.
        let k2 = kh * kw;
        let mut wt = vec![S::ZERO; ci * co * k2];
        transpose_into(&self.val(w).data, &mut wt, ci, co * k2);
        let mut prod = vec![S::ZERO; co * k2 * h * wd];
        matmul_into(&wt, &self.val(x).data, &mut prod, co * k2, ci, h * wd);
        let mut out = col2im(&prod, co, ho, wo, kh, kw, stride, pad, h, wd);
        let bv = &self.val(b).data;
        for (c, chunk) in out.chunks_mut(ho * wo).enumerate() {
            for v in chunk {
                *v = *v + bv[c];
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::from_vec(&[co, ho, wo], out),
            Op::ConvT2d { x, w, b, stride, pad },
            ng,
        )
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.val(a);
        assert_eq!(av.numel(), shape.iter().product::<usize>(), "reshape numel");
        let t = Tensor { shape: shape.to_vec(), data: av.data.clone() };
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Concatenates along `axis`. All other axes must agree.
    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty());
        let first = self.val(inputs[0]).shape.clone();
        let rank = first.len();
        assert!(axis < rank);
        let mut axis_total = 0;
        for &v in inputs {
            let s = &self.val(v).shape;
            assert_eq!(s.len(), rank, "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch on axis {d}");
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![S::ZERO; shape.iter().product()];
        let out_slab = axis_total * inner;
        for o in 0..outer {
            let mut off = 0;
            for &v in inputs {
                let t = self.val(v);
                let slab = t.shape[axis] * inner;
                data[o * out_slab + off..o * out_slab + off + slab]
                    .copy_from_slice(&t.data[o * slab..(o + 1) * slab]);
                off += slab;
            }
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(Tensor::from_vec(&shape, data), Op::Concat { axis, inputs: inputs.to_vec() }, ng)
    }

    /// Gathers rows of a 2-D tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![S::ZERO; rows.len() * c];
        for (i, &row) in rows.iter().enumerate() {
            assert!(row < r, "select_rows index {row} out of {r}");
            data[i * c..(i + 1) * c].copy_from_slice(&xv.data[row * c..(row + 1) * c]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&[rows.len(), c], data),
            Op::SelectRows { x, rows: rows.to_vec() },
            ng,
        )
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c, "slice_cols {start}+{len} out of {c}");
        let mut data = vec![S::ZERO; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&xv.data[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[r, len], data), Op::SliceCols { x, start, len }, ng)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut sum = S::ZERO;
        for &v in &self.val(a).data {
            sum = sum + v;
        }
        let ng = self.ng(a);
        self.push(Tensor::scalar(sum), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).numel();
        let mut sum = S::ZERO;
        for &v in &self.val(a).data {
            sum = sum + v;
        }
        let ng = self.ng(a);
        self.push(Tensor::scalar(sum * S::from_f64(1.0 / n as f64)), Op::MeanAll(a), ng)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `root`. Returns per-var gradients for every
    /// node on a differentiable path to a gradient-marked leaf.
    pub fn backward(&mut self, root: Var) -> Gradients<S> {
        assert_eq!(self.val(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..=root.0).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { by_var: grads };
        }
        grads[root.0] = Some(Tensor::from_vec(&self.val(root).shape.clone(), vec![S::ONE]));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_vjp(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { by_var: grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, contrib: Tensor<S>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape, contrib.shape);
                for (a, b) in g.data.iter_mut().zip(&contrib.data) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn apply_vjp(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, &self.val(*a).shape));
                self.accumulate(grads, *b, reduce_to_shape(g, &self.val(*b).shape));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, &self.val(*a).shape));
                let neg = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|&x| -x).collect(),
                };
                self.accumulate(grads, *b, reduce_to_shape(&neg, &self.val(*b).shape));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.ng(a) {
                    let gb = broadcast_bin(g, self.val(b), |x, y| x * y);
                    self.accumulate(grads, a, reduce_to_shape(&gb, &self.val(a).shape));
                }
                if self.ng(b) {
                    let ga = broadcast_bin(g, self.val(a), |x, y| x * y);
                    self.accumulate(grads, b, reduce_to_shape(&ga, &self.val(b).shape));
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.ng(a) {
                    let da = broadcast_bin(g, self.val(b), |x, y| x / y);
                    self.accumulate(grads, a, reduce_to_shape(&da, &self.val(a).shape));
                }
                if self.ng(b) {
                    let y = &self.nodes[id].value;
                    let gy = broadcast_bin(g, y, |x, v| x * v);
                    let db = broadcast_bin(&gy, self.val(b), |x, v| -(x / v));
                    self.accumulate(grads, b, reduce_to_shape(&db, &self.val(b).shape));
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.val(a).rows(), self.val(a).cols());
                let n = self.val(b).cols();
                if self.ng(a) {
                    // dA = g * B^T
                    let mut bt = vec![S::ZERO; k * n];
                    transpose_into(&self.val(b).data, &mut bt, k, n);
                    let mut da = vec![S::ZERO; m * k];
                    matmul_into(&g.data, &bt, &mut da, m, n, k);
                    self.accumulate(grads, a, Tensor::from_vec(&[m, k], da));
                }
                if self.ng(b) {
                    // dB = A^T * g
                    let mut at = vec![S::ZERO; m * k];
                    transpose_into(&self.val(a).data, &mut at, m, k);
                    let mut db = vec![S::ZERO; k * n];
                    matmul_into(&at, &g.data, &mut db, k, m, n);
                    self.accumulate(grads, b, Tensor::from_vec(&[k, n], db));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (g.rows(), g.cols());
                let mut da = vec![S::ZERO; m * n];
                transpose_into(&g.data, &mut da, n, m);
                self.accumulate(grads, *a, Tensor::from_vec(&[m, n], da));
            }
            Op::Relu(a) => {
                let da = self.mask_unary(*a, g, |x, gi| if x > S::ZERO { gi } else { S::ZERO });
                self.accumulate(grads, *a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let da = self.mask_unary(*a, g, |x, gi| if x > S::ZERO { gi } else { s * gi });
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gi, &yi)| gi * yi * (S::ONE - yi))
                        .collect(),
                };
                self.accumulate(grads, *a, da);
            }
            Op::Log1p(a) => {
                let da = self.mask_unary(*a, g, |x, gi| gi / (S::ONE + x));
                self.accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(&gi, &yi)| gi * yi).collect(),
                };
                self.accumulate(grads, *a, da);
            }
            Op::Ln(a) => {
                let da = self.mask_unary(*a, g, |x, gi| gi / x);
                self.accumulate(grads, *a, da);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                let half = S::from_f64(0.5);
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(&gi, &yi)| gi * half / yi).collect(),
                };
                self.accumulate(grads, *a, da);
            }
            Op::Abs(a) => {
                let da = self.mask_unary(*a, g, |x, gi| {
                    if x > S::ZERO {
                        gi
                    } else if x < S::ZERO {
                        -gi
                    } else {
                        S::ZERO
                    }
                });
                self.accumulate(grads, *a, da);
            }
            Op::Scale(a, c) => {
                let c = *c;
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|&gi| gi * c).collect(),
                };
                self.accumulate(grads, *a, da);
            }
            Op::AddScalar(a, _) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Softmax(a) => {
                let y = &self.nodes[id].value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![S::ZERO; r * c];
                for i in 0..r {
                    let mut dot = S::ZERO;
                    for j in 0..c {
                        dot = dot + g.data[i * c + j] * y.data[i * c + j];
                    }
                    for j in 0..c {
                        da[i * c + j] = (g.data[i * c + j] - dot) * y.data[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[r, c], da));
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[id].value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![S::ZERO; r * c];
                for i in 0..r {
                    let mut gsum = S::ZERO;
                    for j in 0..c {
                        gsum = gsum + g.data[i * c + j];
                    }
                    for j in 0..c {
                        da[i * c + j] = g.data[i * c + j] - y.data[i * c + j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[r, c], da));
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = self.val(x);
                let (r, c) = (xv.rows(), xv.cols());
                let gv = &self.val(gain).data;
                let eps = S::from_f64(LN_EPS);
                let inv_c = S::from_f64(1.0 / c as f64);
                let mut dx = vec![S::ZERO; r * c];
                let mut dgain = vec![S::ZERO; c];
                let mut dbias = vec![S::ZERO; c];
                for i in 0..r {
                    let row = &xv.data[i * c..(i + 1) * c];
                    let mut mean = S::ZERO;
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean * inv_c;
                    let mut var = S::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_c;
                    let inv_std = S::ONE / (var + eps).sqrt();
                    let grow = &g.data[i * c..(i + 1) * c];
                    let mut mean_dxh = S::ZERO;
                    let mut mean_dxh_xh = S::ZERO;
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = grow[j] * gv[j];
                        dgain[j] = dgain[j] + grow[j] * xh;
                        dbias[j] = dbias[j] + grow[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh;
                    }
                    mean_dxh = mean_dxh * inv_c;
                    mean_dxh_xh = mean_dxh_xh * inv_c;
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = grow[j] * gv[j];
                        dx[i * c + j] = inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(&[r, c], dx));
                let gshape = self.val(gain).shape.clone();
                self.accumulate(grads, gain, Tensor::from_vec(&gshape, dgain));
                let bshape = self.val(bias).shape.clone();
                self.accumulate(grads, bias, Tensor::from_vec(&bshape, dbias));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xs = &self.val(x).shape;
                let ws = &self.val(w).shape;
                let (ci, h, wd) = (xs[0], xs[1], xs[2]);
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (g.shape[1], g.shape[2]);
                let k2 = ci * kh * kw;
                if self.ng(b) {
                    let mut db = vec![S::ZERO; co];
                    for c in 0..co {
                        for &gi in &g.data[c * ho * wo..(c + 1) * ho * wo] {
                            db[c] = db[c] + gi;
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&[co], db));
                }
                if self.ng(w) {
                    let cols = im2col(&self.val(x).data, ci, h, wd, kh, kw, stride, pad, ho, wo);
                    let mut colst = vec![S::ZERO; k2 * ho * wo];
                    transpose_into(&cols, &mut colst, k2, ho * wo);
                    let mut dw = vec![S::ZERO; co * k2];
                    matmul_into(&g.data, &colst, &mut dw, co, ho * wo, k2);
                    self.accumulate(grads, w, Tensor::from_vec(&[co, ci, kh, kw], dw));
                }
                if self.ng(x) {
                    let mut wt = vec![S::ZERO; co * k2];
                    transpose_into(&self.val(w).data, &mut wt, co, k2);
                    let mut dcols = vec![S::ZERO; k2 * ho * wo];
                    matmul_into(&wt, &g.data, &mut dcols, k2, co, ho * wo);
                    let dx = col2im(&dcols, ci, h, wd, kh, kw, stride, pad, ho, wo);
                    self.accumulate(grads, x, Tensor::from_vec(&[ci, h, wd], dx));
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xs = &self.val(x).shape;
                let ws = &self.val(w).shape;
                let (ci, h, wd) = (xs[0], xs[1], xs[2]);
                let (co, kh, kw) = (ws[1], ws[2], ws[3]);
                let (ho, wo) = (g.shape[1], g.shape[2]);
                let k2 = kh * kw;
                if self.ng(b) {
                    let mut db = vec![S::ZERO; co];
                    for c in 0..co {
                        for &gi in &g.data[c * ho * wo..(c + 1) * ho * wo] {
                            db[c] = db[c] + gi;
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&[co], db));
                }
                // The output gradient unrolled at the input grid serves both
                // remaining factors: dX = W * cols(g), dW = X * cols(g)^T.
                let gcols = im2col(&g.data, co, ho, wo, kh, kw, stride, pad, h, wd);
                if self.ng(x) {
                    let mut dx = vec![S::ZERO; ci * h * wd];
                    matmul_into(&self.val(w).data, &gcols, &mut dx, ci, co * k2, h * wd);
                    self.accumulate(grads, x, Tensor::from_vec(&[ci, h, wd], dx));
                }
                if self.ng(w) {
                    let mut gcolst = vec![S::ZERO; co * k2 * h * wd];
                    transpose_into(&gcols, &mut gcolst, co * k2, h * wd);
                    let mut dw = vec![S::ZERO; ci * co * k2];
                    matmul_into(&self.val(x).data, &gcolst, &mut dw, ci, h * wd, co * k2);
                    self.accumulate(grads, w, Tensor::from_vec(&[ci, co, kh, kw], dw));
                }
            }
            Op::Reshape(a) => {
                let t = Tensor {
                    shape: self.val(*a).shape.clone(),
                    data: g.data.clone(),
                };
                self.accumulate(grads, *a, t);
            }
            Op::Concat { axis, inputs } => {
                let axis = *axis;
                let gshape = &g.shape;
                let outer: usize = gshape[..axis].iter().product();
                let inner: usize = gshape[axis + 1..].iter().product();
                let out_slab = gshape[axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let vshape = self.val(v).shape.clone();
                    let slab = vshape[axis] * inner;
                    if self.ng(v) {
                        let mut part = vec![S::ZERO; outer * slab];
                        for o in 0..outer {
                            part[o * slab..(o + 1) * slab].copy_from_slice(
                                &g.data[o * out_slab + off..o * out_slab + off + slab],
                            );
                        }
                        self.accumulate(grads, v, Tensor::from_vec(&vshape, part));
                    }
                    off += slab;
                }
            }
            Op::SelectRows { x, rows } => {
                let xv = self.val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = vec![S::ZERO; r * c];
                for (i, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[row * c + j] = dx[row * c + j] + g.data[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[r, c], dx));
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = vec![S::ZERO; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[r, c], dx));
            }
            Op::SumAll(a) => {
                let shape = self.val(*a).shape.clone();
                let n = self.val(*a).numel();
                let t = Tensor { shape, data: vec![g.data[0]; n] };
                self.accumulate(grads, *a, t);
            }
            Op::MeanAll(a) => {
                let shape = self.val(*a).shape.clone();
                let n = self.val(*a).numel();
                let gi = g.data[0] * S::from_f64(1.0 / n as f64);
                let t = Tensor { shape, data: vec![gi; n] };
                self.accumulate(grads, *a, t);
            }
        }
    }

    fn mask_unary(&self, a: Var, g: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let av = self.val(a);
        Tensor {
            shape: g.shape.clone(),
            data: av.data.iter().zip(&g.data).map(|(&x, &gi)| f(x, gi)).collect(),
        }
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    let y = if x > S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    };
    // Pin outputs strictly inside (0,1); exp saturation would otherwise
    // round them onto the endpoints.
    if y < S::EPSILON {
        S::EPSILON
    } else if y > S::ONE - S::EPSILON {
        S::ONE - S::EPSILON
    } else {
        y
    }
}

// ── Broadcasting helpers ────────────────────────────────────────────────────

/// Elementwise combine with numpy-style broadcasting over size-1 axes.
/// Ranks must match; every axis must agree or be 1 on one side.
fn broadcast_bin<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    if a.shape == b.shape {
        return Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        };
    }
    assert_eq!(a.shape.len(), b.shape.len(), "broadcast rank {:?} vs {:?}", a.shape, b.shape);
    let rank = a.shape.len();
    let mut out_shape = vec![0usize; rank];
    for d in 0..rank {
        let (x, y) = (a.shape[d], b.shape[d]);
        assert!(x == y || x == 1 || y == 1, "broadcast {:?} vs {:?}", a.shape, b.shape);
        out_shape[d] = x.max(y);
    }
    let astr = broadcast_strides(&a.shape, &out_shape);
    let bstr = broadcast_strides(&b.shape, &out_shape);
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut ai = 0;
        let mut bi = 0;
        for d in 0..rank {
            ai += idx[d] * astr[d];
            bi += idx[d] * bstr[d];
        }
        data.push(f(a.data[ai], b.data[bi]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor { shape: out_shape, data }
}

fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if shape[d] == 1 && out_shape[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Sums `g` down to `target` shape (inverse of broadcasting).
fn reduce_to_shape<S: Scalar>(g: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if g.shape == target {
        return g.clone();
    }
    let rank = g.shape.len();
    assert_eq!(rank, target.len());
    let tstr = broadcast_strides(target, &g.shape);
    let n: usize = g.shape.iter().product();
    let mut out = vec![S::ZERO; target.iter().product()];
    let mut idx = vec![0usize; rank];
    for flat in 0..n {
        let mut ti = 0;
        for d in 0..rank {
            ti += idx[d] * tstr[d];
        }
        out[ti] = out[ti] + g.data[flat];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < g.shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(target, out)
}
