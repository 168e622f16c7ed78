//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends one node whose inputs were
//! recorded earlier, so execution order is already a topological order.
//! [`Graph::backward`] walks the tape once in reverse.
//!
//! Running `backward` a second time on the same graph is an error
//! ([`Error::BackwardTwice`]); build a fresh graph for every forward pass.
//! Only leaves keep their gradient after the backward pass.
//!
//! Convolution follows the cross-correlation convention (the kernel is not
//! flipped). Max pooling routes the gradient to the first maximal element in
//! row-major scan order.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    w: usize,
    c: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Scalar),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxFlat(Var),
    LogSoftmax(Var),
    Sum(Var),
    Select(Var, usize),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    NarrowLast {
        input: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        index: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Option<Vec<Scalar>>,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        geom: PoolGeom,
        argmax: Vec<usize>,
    },
}

/// Tape of executed operations and their values.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<Scalar>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient of a leaf after [`Graph::backward`]. `None` for constants,
    /// intermediates, and leaves the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(
            Tensor::new(self.values[v.0].shape(), g.clone())
                .expect("gradient shape mirrors value shape"),
        )
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(Scalar) -> Scalar) -> Var {
        let src = &self.values[a.0];
        let data = src.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.requires_grad[a.0];
        self.push(out, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(Scalar, Scalar) -> Scalar) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(out, op, rg)
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rows(self.values[a.0].data(), k),
            MatRef::rows(self.values[b.0].data(), n),
            0.0,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `bias` (length equal to the last extent of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        let tb = &self.values[bias.0];
        let n = *ta.shape().last().expect("rank ≥ 1");
        if tb.len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match last extent of {:?}", tb.shape(), ta.shape()),
            ));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: Scalar) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: Scalar) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), Scalar::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Softmax over every entry of `a` regardless of shape.
    pub fn softmax_flat(&mut self, a: Var) -> Var {
        let src = &self.values[a.0];
        let out = Tensor::new(src.shape(), softmax(src.data())).expect("same shape");
        let rg = self.requires_grad[a.0];
        self.push(out, Op::SoftmaxFlat(a), rg)
    }

    /// Log-softmax over every entry of `a`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = &self.values[a.0];
        let lse = log_sum_exp(src.data());
        let data = src.data().iter().map(|&x| x - lse).collect();
        let out = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.requires_grad[a.0];
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let rg = self.requires_grad[a.0];
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Entry `index` of the flattened tensor as a one-element tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let src = &self.values[a.0];
        if index >= src.len() {
            return Err(Error::shape(
                "select",
                format!("index {index} out of range for {:?}", src.shape()),
            ));
        }
        let v = src.data()[index];
        let rg = self.requires_grad[a.0];
        Ok(self.push(Tensor::scalar(v), Op::Select(a, index), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[a.0].reshaped(shape)?;
        let rg = self.requires_grad[a.0];
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenates along the last axis. All other extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = {
            let s = self.values[first.0].shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.values[p.0].shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "leading extents differ: {:?} vs {:?}",
                        self.values[first.0].shape(),
                        s
                    ),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Channel concatenation of `H×W×C` tensors with equal spatial extents.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for p in parts {
            self.values[p.0].hwc("concat_channels")?;
        }
        self.concat_last(parts)
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.values[a.0];
        let s = src.shape();
        let width = s[s.len() - 1];
        if len == 0 || start + len > width {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} outside last extent of {s:?}", start + len),
            ));
        }
        let data = src
            .data()
            .chunks_exact(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.requires_grad[a.0];
        Ok(self.push(Tensor::new(&shape, data)?, Op::NarrowLast { input: a, start }, rg))
    }

    /// Row `index` of a `rows×dim` table, as a `1×dim` tensor.
    pub fn embedding(&mut self, table: Var, index: usize) -> Result<Var> {
        let t = &self.values[table.0];
        let (rows, dim) = match t.shape() {
            [r, d] => (*r, *d),
            s => return Err(Error::shape("embedding", format!("table must be 2-D, got {s:?}"))),
        };
        if index >= rows {
            return Err(Error::shape(
                "embedding",
                format!("index {index} out of range for {rows} rows"),
            ));
        }
        let data = t.data()[index * dim..(index + 1) * dim].to_vec();
        let rg = self.requires_grad[table.0];
        Ok(self.push(Tensor::new(&[1, dim], data)?, Op::Embedding { table, index }, rg))
    }

    /// 2-D cross-correlation of `input[H×W×Cin]` with `kernel[kh×kw×Cin×Cout]`.
    ///
    /// Output extents are `(H + 2·padding − kh) / stride + 1` (floored), and
    /// likewise for the width. Padding is zero.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (h, w, cin) = self.values[input.0].hwc("conv2d")?;
        let (kh, kw, kcin, cout) = match self.values[kernel.0].shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::shape("conv2d", format!("kernel must be 4-D, got {s:?}"))),
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be ≥ 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let rg = self.any_grad(&[input, kernel]);
        let rows = geom.oh * geom.ow;
        let kd = geom.patch_len();
        let mut out = vec![0.0; rows * cout];
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(self.values[input.0].data(), &geom))
        };
        {
            let patches = cols.as_deref().unwrap_or(self.values[input.0].data());
            gemm(
                rows,
                kd,
                cout,
                MatRef::rows(patches, kd),
                MatRef::rows(self.values[kernel.0].data(), cout),
                0.0,
                &mut out,
            );
        }
        let cols = if rg { cols } else { None };
        let value = Tensor::new(&[geom.oh, geom.ow, cout], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, geom, cols }, rg))
    }

    /// Windowed max or mean per channel over an `H×W×C` tensor, no padding.
    pub fn pool2d(&mut self, input: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let (h, w, c) = self.values[input.0].hwc("pool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::shape("pool2d", "window and stride must be ≥ 1"));
        }
        if window > h || window > w {
            return Err(Error::shape(
                "pool2d",
                format!("window {window} exceeds input {h}×{w}"),
            ));
        }
        let geom = PoolGeom {
            w,
            c,
            window,
            stride,
            oh: (h - window) / stride + 1,
            ow: (w - window) / stride + 1,
        };
        let src = self.values[input.0].data();
        let n = geom.oh * geom.ow * c;
        let mut out = vec![0.0; n];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Max => {
                argmax = vec![0usize; n];
                for oy in 0..geom.oh {
                    for ox in 0..geom.ow {
                        for ch in 0..c {
                            let mut best = usize::MAX;
                            for ky in 0..window {
                                for kx in 0..window {
                                    let idx = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                    if best == usize::MAX || src[idx] > src[best] {
                                        best = idx;
                                    }
                                }
                            }
                            let o = (oy * geom.ow + ox) * c + ch;
                            out[o] = src[best];
                            argmax[o] = best;
                        }
                    }
                }
            }
            PoolKind::Average => {
                let inv = 1.0 / (window * window) as Scalar;
                for oy in 0..geom.oh {
                    for ox in 0..geom.ow {
                        let o = (oy * geom.ow + ox) * c;
                        for ky in 0..window {
                            for kx in 0..window {
                                let i = ((oy * stride + ky) * w + ox * stride + kx) * c;
                                for ch in 0..c {
                                    out[o + ch] += src[i + ch];
                                }
                            }
                        }
                        for v in &mut out[o..o + c] {
                            *v *= inv;
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad[input.0];
        let value = Tensor::new(&[geom.oh, geom.ow, c], out)?;
        Ok(self.push(value, Op::Pool { input, kind, geom, argmax }, rg))
    }

    /// Propagates `d loss / d node` from the one-element tensor `loss` back
    /// to every leaf created with [`Graph::param`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a single value, got {:?}", self.values[loss.0].shape()),
            ));
        }
        self.backward_done = true;
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let mut ctx = Backprop {
                values: &self.values,
                grads: &mut self.grads,
                requires_grad: &self.requires_grad,
            };
            ctx.run(&self.ops[i], &self.values[i], &dy);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(xs: &[Scalar]) -> Vec<Scalar> {
    let max = xs.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut out: Vec<Scalar> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: Scalar = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

pub fn log_sum_exp(xs: &[Scalar]) -> Scalar {
    let max = xs.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<Scalar>().ln()
}

fn im2col(src: &[Scalar], g: &ConvGeom) -> Vec<Scalar> {
    let kd = g.patch_len();
    let mut cols = vec![0.0; g.oh * g.ow * kd];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * kd;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let s = (iy as usize * g.w + ix as usize) * g.cin;
                    let d = row + (ky * g.kw + kx) * g.cin;
                    cols[d..d + g.cin].copy_from_slice(&src[s..s + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[Scalar], g: &ConvGeom, dst: &mut [Scalar]) {
    let kd = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * kd;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let s = (iy as usize * g.w + ix as usize) * g.cin;
                    let d = row + (ky * g.kw + kx) * g.cin;
                    for (o, &v) in dst[s..s + g.cin].iter_mut().zip(&dcols[d..d + g.cin]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

struct Backprop<'a> {
    values: &'a [Tensor],
    grads: &'a mut [Option<Vec<Scalar>>],
    requires_grad: &'a [bool],
}

impl Backprop<'_> {
    /// Gradient buffer of `v`, zero-initialised on first use; `None` when
    /// `v` does not need a gradient.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<Scalar>> {
        if !self.requires_grad[v.0] {
            return None;
        }
        let n = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add_each(&mut self, v: Var, dy: &[Scalar], f: impl Fn(usize, Scalar) -> Scalar) {
        if let Some(g) = self.slot(v) {
            for (i, (gi, &d)) in g.iter_mut().zip(dy).enumerate() {
                *gi += f(i, d);
            }
        }
    }

    fn run(&mut self, op: &Op, out: &Tensor, dy: &[Scalar]) {
        let values = self.values;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&values[a.0], &values[b.0]);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.slot(*a) {
                    // da += dy · bᵀ
                    gemm(m, n, k, MatRef::rows(dy, n), MatRef::transposed(tb.data(), n), 1.0, ga);
                }
                if let Some(gb) = self.slot(*b) {
                    // db += aᵀ · dy
                    gemm(k, m, n, MatRef::transposed(ta.data(), k), MatRef::rows(dy, n), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                self.add_each(*a, dy, |_, d| d);
                self.add_each(*b, dy, |_, d| d);
            }
            Op::Sub(a, b) => {
                self.add_each(*a, dy, |_, d| d);
                self.add_each(*b, dy, |_, d| -d);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                self.add_each(*a, dy, |i, d| d * vb[i]);
                self.add_each(*b, dy, |i, d| d * va[i]);
            }
            Op::AddBias(a, bias) => {
                self.add_each(*a, dy, |_, d| d);
                let n = values[bias.0].len();
                if let Some(gb) = self.slot(*bias) {
                    for row in dy.chunks_exact(n) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.add_each(*a, dy, |_, d| d * s),
            Op::AddScalar(a) | Op::Reshape(a) => self.add_each(*a, dy, |_, d| d),
            Op::Tanh(a) => {
                let y = out.data();
                self.add_each(*a, dy, |i, d| d * (1.0 - y[i] * y[i]));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.add_each(*a, dy, |i, d| d * y[i] * (1.0 - y[i]));
            }
            Op::Relu(a) => {
                let x = values[a.0].data();
                self.add_each(*a, dy, |i, d| if x[i] > 0.0 { d } else { 0.0 });
            }
            Op::SoftmaxFlat(a) => {
                let y = out.data();
                let dot: Scalar = y.iter().zip(dy).map(|(p, d)| p * d).sum();
                self.add_each(*a, dy, |i, d| y[i] * (d - dot));
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let total: Scalar = dy.iter().sum();
                self.add_each(*a, dy, |i, d| d - y[i].exp() * total);
            }
            Op::Sum(a) => {
                let d = dy[0];
                if let Some(g) = self.slot(*a) {
                    g.iter_mut().for_each(|x| *x += d);
                }
            }
            Op::Select(a, index) => {
                if let Some(g) = self.slot(*a) {
                    g[*index] += dy[0];
                }
            }
            Op::ConcatLast(parts) => {
                let total = *out.shape().last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let w = *values[p.0].shape().last().unwrap();
                    if let Some(g) = self.slot(*p) {
                        for (r, row) in dy.chunks_exact(total).enumerate() {
                            for (gi, &d) in g[r * w..(r + 1) * w].iter_mut().zip(&row[offset..offset + w]) {
                                *gi += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::NarrowLast { input, start } => {
                let width = *values[input.0].shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                if let Some(g) = self.slot(*input) {
                    for (row, d) in g.chunks_exact_mut(width).zip(dy.chunks_exact(len)) {
                        for (gi, &di) in row[*start..start + len].iter_mut().zip(d) {
                            *gi += di;
                        }
                    }
                }
            }
            Op::Embedding { table, index } => {
                let dim = dy.len();
                if let Some(g) = self.slot(*table) {
                    for (gi, &d) in g[index * dim..(index + 1) * dim].iter_mut().zip(dy) {
                        *gi += d;
                    }
                }
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                let rows = geom.oh * geom.ow;
                let kd = geom.patch_len();
                let cout = geom.cout;
                let kdata = values[kernel.0].data();
                if self.requires_grad[kernel.0] {
                    let patches = cols.as_deref().unwrap_or(values[input.0].data());
                    let gk = self.slot(*kernel).unwrap();
                    // dK += colsᵀ · dy
                    gemm(kd, rows, cout, MatRef::transposed(patches, kd), MatRef::rows(dy, cout), 1.0, gk);
                }
                if self.requires_grad[input.0] {
                    if geom.is_pointwise() {
                        let gi = self.slot(*input).unwrap();
                        gemm(rows, cout, kd, MatRef::rows(dy, cout), MatRef::transposed(kdata, cout), 1.0, gi);
                    } else {
                        let mut dcols = vec![0.0; rows * kd];
                        gemm(rows, cout, kd, MatRef::rows(dy, cout), MatRef::transposed(kdata, cout), 0.0, &mut dcols);
                        let gi = self.slot(*input).unwrap();
                        col2im_add(&dcols, geom, gi);
                    }
                }
            }
            Op::Pool { input, kind, geom, argmax } => {
                let Some(g) = self.slot(*input) else { return };
                match kind {
                    PoolKind::Max => {
                        for (&src, &d) in argmax.iter().zip(dy) {
                            g[src] += d;
                        }
                    }
                    PoolKind::Average => {
                        let inv = 1.0 / (geom.window * geom.window) as Scalar;
                        let c = geom.c;
                        for oy in 0..geom.oh {
                            for ox in 0..geom.ow {
                                let o = (oy * geom.ow + ox) * c;
                                for ky in 0..geom.window {
                                    for kx in 0..geom.window {
                                        let i = ((oy * geom.stride + ky) * geom.w + ox * geom.stride + kx) * c;
                                        for ch in 0..c {
                                            g[i + ch] += dy[o + ch] * inv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        // the first pass's gradients are untouched
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let b = g.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 0.0, 7.0, 9.0]));
        let y = g.matmul(i, b).unwrap();
        assert_eq!(g.value(y), g.value(b));
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[5], 0.3));
        let y = g.softmax_flat(x);
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let big = g.constant(t(&[3], &[1000.0, 999.0, -1000.0]));
        let y = g.softmax_flat(big);
        assert!((g.value(y).sum() - 1.0).abs() < 1e-12);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn average_pool_mean() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.pool2d(x, PoolKind::Average, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2, 1], &[5.0, 5.0, 5.0, 5.0]));
        let y = g.pool2d(x, PoolKind::Max, 2, 2).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_window_too_large() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 1]));
        assert!(g.pool2d(x, PoolKind::Max, 3, 1).is_err());
    }

    #[test]
    fn conv_kernel_larger_than_padded_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 1]));
        let k = g.constant(Tensor::zeros(&[5, 5, 1, 1]));
        assert!(g.conv2d(x, k, 1, 1).is_err());
        let k = g.constant(Tensor::zeros(&[4, 4, 1, 1]));
        assert!(g.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn conv_output_extents() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[7, 9, 2]));
        let k = g.constant(Tensor::zeros(&[3, 3, 2, 4]));
        let same = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.value(same).shape(), &[7, 9, 4]);
        let strided = g.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(g.value(strided).shape(), &[3, 4, 4]);
    }

    #[test]
    fn concat_channels_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2, 1]));
        let b = g.constant(Tensor::zeros(&[2, 3, 1]));
        assert!(g.concat_channels(&[a, b]).is_err());
        let c = g.constant(Tensor::full(&[2, 2, 2], 1.0));
        let y = g.concat_channels(&[a, c]).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 3]);
        assert_eq!(&g.value(y).data()[..3], &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn narrow_and_embedding() {
        let mut g = Graph::new();
        let table = g.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = g.embedding(table, 1).unwrap();
        assert_eq!(g.value(row).data(), &[3.0, 4.0]);
        let part = g.narrow_last(row, 1, 1).unwrap();
        assert_eq!(g.value(part).data(), &[4.0]);
        g.backward(part).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(g.embedding(table, 3).is_err());
    }
}
