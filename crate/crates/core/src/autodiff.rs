//! A small reverse-mode tape over [`Tensor`] values.
//!
//! The graph records every operation in construction order, so a single
//! reverse sweep visits each node after all of its consumers. Leaves are
//! borrowed where possible: model parameters are never copied into the tape.
//! Reductions are plain sequential loops, which keeps gradients bit-stable
//! from run to run.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        /// im2col buffer, kept only when the weight needs a gradient.
        cols: Option<Vec<f64>>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed leaf. `tracked` leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: &'a Tensor, tracked: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, tracked)
    }

    pub fn leaf_owned(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        let node = self.nodes.swap_remove(v.0);
        node.value.into_owned()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation with square kernel, zero padding `pad` and
    /// the given stride. `weight` is `[out, in, k, k]`, `bias` is `[out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.shape().len() != 3 || w.shape().len() != 4 {
            return Err(Error::Model(format!(
                "conv2d expects [c,h,w] input and [o,i,k,k] weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (cin, h, wd) = x.chw();
        let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wcin != cin || w.shape()[3] != k || b.shape() != [cout] {
            return Err(Error::Model(format!(
                "conv2d shape mismatch: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Model(format!("conv2d input {h}x{wd} smaller than kernel {k}")));
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let cols = geom.im2col(x.data());
        let rows = geom.rows();
        let p = geom.out_len();
        let mut out = vec![0.0; cout * p];
        gemm(cout, rows, p, w.data(), Layout::rows(rows), &cols, Layout::rows(p), &mut out);
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            let bo = b.data()[o];
            if bo != 0.0 {
                for v in chunk {
                    *v += bo;
                }
            }
        }
        let value = Tensor::from_vec(&[cout, geom.ho, geom.wo], out);
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        let cols = self.tracked(weight).then_some(cols);
        Ok(self.push(
            Cow::Owned(value),
            Op::Conv {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
            tracked,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let tracked = self.tracked(x);
        self.push(Cow::Owned(value), Op::LeakyRelu { x, slope }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let tracked = self.tracked(x);
        self.push(Cow::Owned(value), Op::Sigmoid(x), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Model(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Cow::Owned(value), Op::Add(a, b), tracked))
    }

    /// Channel concatenation of `[c_i, h, w]` maps.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Model("concat of zero tensors".into()));
        };
        let (_, h, w) = self.value(first).chw();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (c, ph, pw) = t.chw();
            if (ph, pw) != (h, w) {
                return Err(Error::Model(format!(
                    "concat spatial mismatch: {h}x{w} vs {ph}x{pw}"
                )));
            }
            channels += c;
            data.extend_from_slice(t.data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let value = Tensor::from_vec(&[channels, h, w], data);
        Ok(self.push(Cow::Owned(value), Op::Concat(parts.to_vec()), tracked))
    }

    /// Bilinear 2x upsampling with half-pixel centres (`align_corners = false`).
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let rows = upsample_taps(h);
        let cols = upsample_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = t.channel(ch);
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(
            Cow::Owned(Tensor::from_vec(&[c, oh, ow], out)),
            Op::Upsample2x(x),
            tracked,
        )
    }

    /// Reverse sweep from the given output gradients. Only tracked leaves
    /// keep their gradient in the result.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                g.shape(),
                self.value(v).shape(),
                "seed gradient shape does not match its node"
            );
            self.accumulate(&mut grads, v, g);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                    cols,
                } => self.conv_backward(&mut grads, &g, *input, *weight, *bias, *stride, *pad, cols.as_deref()),
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d *= slope;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.tracked(*b) {
                        self.accumulate(&mut grads, *b, g.clone());
                    }
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let len: usize = shape.iter().product();
                        if self.tracked(p) {
                            let slice = g.data()[offset..offset + len].to_vec();
                            self.accumulate(&mut grads, p, Tensor::from_vec(&shape, slice));
                        }
                        offset += len;
                    }
                }
                Op::Upsample2x(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let rows = upsample_taps(h);
                    let cols = upsample_taps(w);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let src = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
                        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                                let d = src[oy * ow + ox];
                                dst[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                                dst[y0 * w + x1] += d * (1.0 - fy) * fx;
                                dst[y1 * w + x0] += d * fy * (1.0 - fx);
                                dst[y1 * w + x1] += d * fy * fx;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, Tensor::from_vec(&[c, h, w], dx));
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        cols: Option<&[f64]>,
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let (cin, h, wd) = x.chw();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let rows = geom.rows();
        let p = geom.out_len();
        let dout = g.data();

        if self.tracked(weight) {
            let cols = cols.expect("im2col buffer kept for tracked weight");
            let mut dw = vec![0.0; cout * rows];
            // dW = dOut * cols^T
            gemm(cout, p, rows, dout, Layout::rows(p), cols, Layout::cols(p), &mut dw);
            self.accumulate(grads, weight, Tensor::from_vec(w.shape(), dw));
        }
        if self.tracked(bias) {
            let db: Vec<f64> = dout.chunks(p).map(|c| c.iter().sum()).collect();
            self.accumulate(grads, bias, Tensor::from_vec(&[cout], db));
        }
        if self.tracked(input) {
            let mut dcols = vec![0.0; rows * p];
            // dCols = W^T * dOut
            gemm(rows, cout, p, w.data(), Layout::cols(rows), dout, Layout::rows(p), &mut dcols);
            let dx = geom.col2im(&dcols);
            self.accumulate(grads, input, Tensor::from_vec(&[cin, h, wd], dx));
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// For each output coordinate: (low index, high index, weight of high).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Source index for output position `o` and kernel tap `t` along one axis.
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let s = (o * self.stride + t) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < limit).then_some(s as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.out_len();
        let mut cols = vec![0.0; self.rows() * p];
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let Some(sy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(sx) = self.src(ox, kx, self.w) {
                                dst[oy * self.wo + ox] = plane[sy * self.w + sx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.out_len();
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let Some(sy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(sx) = self.src(ox, kx, self.w) {
                                plane[sy * self.w + sx] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Row/column strides of a dense matrix operand.
#[derive(Clone, Copy)]
struct Layout {
    rs: isize,
    cs: isize,
}

impl Layout {
    /// Row-major with `ld` elements per row.
    fn rows(ld: usize) -> Self {
        Self { rs: ld as isize, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `ld` elements per row.
    fn cols(ld: usize) -> Self {
        Self { rs: 1, cs: ld as isize }
    }
}

/// `c = a * b` where `a` is `m x k`, `b` is `k x n`, `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    // SAFETY: the asserts above bound every index reachable through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
