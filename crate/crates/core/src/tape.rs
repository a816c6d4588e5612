//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every primitive pushes one node holding its output value and the
//! information its backward rule needs. Nodes only reference earlier nodes,
//! so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, AxisTable, ConvGeom};
use crate::real::Real;
use crate::tensor::{like_nchw, nchw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Integer-or-fractional window on a CHW map, in pixel units.
///
/// `top`/`left` give the upper-left corner; the window spans `rows × cols`
/// cells, each sampled once at its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub top: f64,
    pub left: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CE_CLAMP: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, tb: bool },
    Transpose { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddRowBias { x: Var, b: Var },
    Relu { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Softmax { x: Var, outer: usize, axis: usize, inner: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<u32> },
    Resize { x: Var, planes: usize, hw: (usize, usize), ty: AxisTable, tx: AxisTable },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, hw: usize, training: bool },
    RoiAlign { x: Var, taps: Vec<[(usize, T); 4]> },
    ScatterMean { updates: Vec<Var>, index: Vec<Vec<usize>>, counts: Vec<u32> },
    Sum { x: Var, scale: T },
    L1Mean { p: Var, target: Tensor<T> },
    CrossEntropy { p: Var, picks: Vec<usize> },
    Dice { p: Var, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Floating-point operation counts of executed forward primitives, keyed by
/// scope path (`"cgt/attn"`). Data movement is free; loss terms are not
/// counted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopMeter {
    by_scope: BTreeMap<String, u64>,
}

impl FlopMeter {
    pub fn total(&self) -> u64 {
        self.by_scope.values().sum()
    }

    /// Sum over every scope equal to `prefix` or nested below it.
    pub fn under(&self, prefix: &str) -> u64 {
        self.by_scope
            .iter()
            .filter(|(k, _)| {
                k.as_str() == prefix || (k.starts_with(prefix) && k.as_bytes().get(prefix.len()) == Some(&b'/'))
            })
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn scopes(&self) -> impl Iterator<Item = (&str, u64)> {
        self.by_scope.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Recorded computation graph.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    scope: Vec<&'static str>,
    meter: FlopMeter,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sizes_of(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: Vec::new(),
            meter: FlopMeter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn flops(&self) -> &FlopMeter {
        &self.meter
    }

    pub fn push_scope(&mut self, name: &'static str) {
        self.scope.push(name);
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn count(&mut self, flops: u64) {
        if flops == 0 {
            return;
        }
        let key = self.scope.join("/");
        *self.meter.by_scope.entry(key).or_insert(0) += flops;
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `A·B` for `A: m×k`, `B: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `A·Bᵀ` for `A: m×k`, `B: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (r, c) = self.matrix("matmul", b)?;
        let (kb, n) = if tb { (c, r) } else { (r, c) };
        if k != kb {
            return Err(shape_err("matmul", format!("inner dimensions {k} and {kb} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false, tb, false);
        self.count(2 * (m * k * n) as u64);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::MatMul { a, b, m, k, n, tb }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::from_parts(vec![c, r], out);
        self.push("transpose", value, Op::Transpose { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.count(value.len() as u64);
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.count(value.len() as u64);
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.count(value.len() as u64);
        self.push("scale", value, Op::Scale { x, s }, &[x])
    }

    /// Adds the vector `b: m` to every row of `x: n×m`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, m) = self.matrix("add_row_bias", x)?;
        if self.shape(b) != [m] {
            return Err(shape_err("add_row_bias", format!("bias {:?} for width {m}", self.shape(b))));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data();
        for row in value.data_mut().chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        self.count(value.len() as u64);
        self.push("add_row_bias", value, Op::AddRowBias { x, b }, &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.count(value.len() as u64);
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = sizes_of(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let a = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let value = Tensor::from_parts(shape, out);
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("{start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, a, inner) = sizes_of(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * a + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::from_parts(oshape, out);
        self.push("narrow", value, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, a, inner) = sizes_of(&shape, axis);
        let mut out = vec![T::zero(); outer * a * inner];
        kernels::softmax_forward(outer, a, inner, self.value(x).data(), &mut out);
        self.count(4 * out.len() as u64);
        let value = Tensor::from_parts(shape, out);
        self.push("softmax", value, Op::Softmax { x, outer, axis: a, inner }, &[x])
    }

    /// Same-padded stride-1 convolution (cross-correlation) with an odd
    /// square kernel `w: C_out×C_in×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, height, width) = nchw("conv2d", &xs)?;
        let (c_out, wc, kernel) = match *self.shape(w) {
            [o, i, kh, kw] if kh == kw && kh % 2 == 1 => (o, i, kh),
            ref s => return Err(shape_err("conv2d", format!("weight {s:?} is not C_out×C_in×k×k with odd k"))),
        };
        if wc != c_in {
            return Err(shape_err("conv2d", format!("input has {c_in} channels, weight expects {wc}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv2d", format!("bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            height,
            width,
            kernel,
        };
        let mut out = vec![T::zero(); batch * c_out * height * width];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        self.count(2 * (kernel * kernel * c_in * c_out * height * width * batch) as u64);
        let value = Tensor::from_parts(like_nchw(&xs, batch, c_out, height, width), out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = nchw("maxpool2x2", &xs)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("maxpool2x2", format!("odd spatial size {h}×{w}")));
        }
        let mut out = vec![T::zero(); b * c * (h / 2) * (w / 2)];
        let argmax = kernels::maxpool2x2_forward(b * c, h, w, self.value(x).data(), &mut out);
        self.count(3 * out.len() as u64);
        let value = Tensor::from_parts(like_nchw(&xs, b, c, h / 2, w / 2), out);
        self.push("maxpool2x2", value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Bilinear resampling with half-pixel centers to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = nchw("resize_bilinear", &xs)?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("resize_bilinear", "empty output"));
        }
        let ty = AxisTable::new(h, out_h);
        let tx = AxisTable::new(w, out_w);
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        kernels::resize_forward(b * c, (h, w), &ty, &tx, self.value(x).data(), &mut out);
        self.count(7 * out.len() as u64);
        let value = Tensor::from_parts(like_nchw(&xs, b, c, out_h, out_w), out);
        self.push(
            "resize_bilinear",
            value,
            Op::Resize {
                x,
                planes: b * c,
                hw: (h, w),
                ty,
                tx,
            },
            &[x],
        )
    }

    /// Integer-factor bilinear upsampling.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = nchw("upsample", self.shape(x))?;
        if factor == 0 {
            return Err(shape_err("upsample", "zero factor"));
        }
        self.resize_bilinear(x, h * factor, w * factor)
    }

    /// Integer-factor bilinear downsampling; dimensions must divide.
    pub fn downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = nchw("downsample", self.shape(x))?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(shape_err("downsample", format!("{h}×{w} not divisible by {factor}")));
        }
        self.resize_bilinear(x, h / factor, w / factor)
    }

    /// Batch normalization over an NCHW (or CHW) tensor.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// running statistics are updated with momentum 0.1 (unbiased variance);
    /// in eval mode the running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        training: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (b, c, h, w) = nchw("batch_norm", &xs)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(shape_err("batch_norm", format!("affine parameters do not match {c} channels")));
        }
        let hw = h * w;
        let n = b * hw;
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = if training {
            if n < 2 {
                return Err(Error::DegenerateBatch { shape: xs });
            }
            let (mean, var) = kernels::channel_stats(b, c, hw, self.value(x).data());
            let mom = T::from_f64(BN_MOMENTUM);
            for ch in 0..c {
                let unbiased = var[ch] * n as f64 / (n - 1) as f64;
                running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * T::from_f64(mean[ch]);
                running.var[ch] = (T::one() - mom) * running.var[ch] + mom * T::from_f64(unbiased);
            }
            let inv = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
            (mean, inv)
        } else {
            let mean = running.mean.iter().map(|v| v.as_f64()).collect();
            let inv = running.var.iter().map(|v| 1.0 / libm::sqrt(v.as_f64() + BN_EPS)).collect();
            (mean, inv)
        };
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let m = T::from_f64(mean[ch]);
                let is = T::from_f64(inv_std[ch]);
                for i in off..off + hw {
                    let xh = (src[i] - m) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        self.count(2 * out.len() as u64);
        let value = Tensor::from_parts(xs, out);
        let inv_std = inv_std.iter().map(|&v| T::from_f64(v)).collect();
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                hw,
                training,
            },
            &[x, gamma, beta],
        )
    }

    /// Samples one window of a CHW map into `(rows·cols) × C` tokens, one
    /// bilinear sample per cell center. Integer-aligned windows are exact
    /// crops.
    pub fn roi_align(&mut self, x: Var, roi: RoiBox) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(shape_err("roi_align", format!("expected CHW, got {s:?}"))),
        };
        if roi.rows == 0
            || roi.cols == 0
            || roi.top < 0.0
            || roi.left < 0.0
            || roi.top + roi.rows as f64 > h as f64
            || roi.left + roi.cols as f64 > w as f64
        {
            return Err(shape_err("roi_align", format!("window {roi:?} outside {h}×{w}")));
        }
        let axis = |start: f64, i: usize, n: usize| -> (usize, usize, f64) {
            // cell center in continuous coordinates, mapped to pixel index space
            let u = start + i as f64;
            let lo = (libm::floor(u) as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let t = if hi == lo { 0.0 } else { u - lo as f64 };
            (lo, hi, t)
        };
        let mut taps = Vec::with_capacity(roi.rows * roi.cols);
        for i in 0..roi.rows {
            let (y0, y1, ty) = axis(roi.top, i, h);
            for j in 0..roi.cols {
                let (x0, x1, tx) = axis(roi.left, j, w);
                taps.push([
                    (y0 * w + x0, T::from_f64((1.0 - ty) * (1.0 - tx))),
                    (y0 * w + x1, T::from_f64((1.0 - ty) * tx)),
                    (y1 * w + x0, T::from_f64(ty * (1.0 - tx))),
                    (y1 * w + x1, T::from_f64(ty * tx)),
                ]);
            }
        }
        let src = self.value(x).data();
        let hw = h * w;
        let mut out = vec![T::zero(); taps.len() * c];
        for (t, tap) in taps.iter().enumerate() {
            for ch in 0..c {
                let plane = &src[ch * hw..(ch + 1) * hw];
                out[t * c + ch] = tap.iter().fold(T::zero(), |acc, &(i, wt)| acc + wt * plane[i]);
            }
        }
        let value = Tensor::from_parts(vec![taps.len(), c], out);
        self.push("roi_align", value, Op::RoiAlign { x, taps }, &[x])
    }

    /// Writes window token updates back onto a `channels × h × w` map.
    ///
    /// Each update is `(rows·cols) × channels` for an integer window. Pixels
    /// covered by several windows receive the mean of their updates; pixels
    /// outside every window are zero.
    pub fn scatter_mean(
        &mut self,
        updates: &[Var],
        windows: &[RoiBox],
        channels: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        if updates.len() != windows.len() {
            return Err(shape_err("scatter_mean", "one update per window required"));
        }
        let hw = h * w;
        let mut counts = vec![0u32; hw];
        let mut index = Vec::with_capacity(windows.len());
        for (&u, roi) in updates.iter().zip(windows) {
            let (top, left) = (roi.top as usize, roi.left as usize);
            if libm::floor(roi.top) != roi.top || libm::floor(roi.left) != roi.left || top + roi.rows > h || left + roi.cols > w {
                return Err(shape_err("scatter_mean", format!("window {roi:?} not an integer window in {h}×{w}")));
            }
            if self.shape(u) != [roi.rows * roi.cols, channels] {
                return Err(shape_err("scatter_mean", format!("update {:?} for window {roi:?}", self.shape(u))));
            }
            let mut idx = Vec::with_capacity(roi.rows * roi.cols);
            for i in 0..roi.rows {
                for j in 0..roi.cols {
                    let p = (top + i) * w + left + j;
                    counts[p] += 1;
                    idx.push(p);
                }
            }
            index.push(idx);
        }
        let mut out = vec![T::zero(); channels * hw];
        for (&u, idx) in updates.iter().zip(&index) {
            let src = self.value(u).data();
            for (t, &p) in idx.iter().enumerate() {
                let inv = T::one() / T::from_usize(counts[p] as usize);
                for ch in 0..channels {
                    out[ch * hw + p] += src[t * channels + ch] * inv;
                }
            }
        }
        let written: usize = index.iter().map(|i| i.len()).sum();
        self.count(2 * (written * channels) as u64);
        let value = Tensor::from_parts(vec![channels, h, w], out);
        self.push(
            "scatter_mean",
            value,
            Op::ScatterMean {
                updates: updates.to_vec(),
                index,
                counts,
            },
            updates,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x, scale: T::one() }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).len());
        let s = self.value(x).sum() / n;
        self.push(
            "mean",
            Tensor::scalar(s),
            Op::Sum {
                x,
                scale: T::one() / n,
            },
            &[x],
        )
    }

    /// Mean absolute difference between `p` and a constant target.
    pub fn l1_mean(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(shape_err("l1_mean", format!("{:?} vs {:?}", self.shape(p), target.shape())));
        }
        let n = T::from_usize(target.len());
        let s: T = self.value(p).data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
        self.push(
            "l1_mean",
            Tensor::scalar(s / n),
            Op::L1Mean {
                p,
                target: target.clone(),
            },
            &[p],
        )
    }

    /// Mean over pixels of `−ln max(P(label), 1e-12)` for class
    /// probabilities `p: B×c×H×W` (or `c×H×W`) and integer labels `B×H×W`.
    pub fn cross_entropy(&mut self, p: Var, labels: &[u8]) -> Result<Var> {
        let ps = self.shape(p).to_vec();
        let (b, c, h, w) = nchw("cross_entropy", &ps)?;
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(shape_err("cross_entropy", format!("{} labels for {b}×{h}×{w}", labels.len())));
        }
        let mut picks = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= c {
                return Err(Error::Invalid(format!("label {l} outside 0..{c}")));
            }
            let (bi, pix) = (i / hw, i % hw);
            picks.push((bi * c + l) * hw + pix);
        }
        let src = self.value(p).data();
        let clamp = T::from_f64(CE_CLAMP);
        let total: T = picks.iter().map(|&i| -src[i].max(clamp).ln()).sum();
        let value = Tensor::scalar(total / T::from_usize(picks.len()));
        self.push("cross_entropy", value, Op::CrossEntropy { p, picks }, &[p])
    }

    /// Soft Dice loss `1 − mean_l (2ΣPG + ε)/(ΣP + ΣG + ε)`, computed per
    /// sample and averaged over the batch.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(shape_err("dice_loss", format!("{:?} vs {:?}", self.shape(p), target.shape())));
        }
        let (b, c, h, w) = nchw("dice_loss", target.shape())?;
        let hw = h * w;
        let eps = T::from_f64(DICE_EPS);
        let pv = self.value(p).data();
        let gv = target.data();
        let mut acc = T::zero();
        for k in 0..b * c {
            let sl = k * hw..(k + 1) * hw;
            let inter: T = pv[sl.clone()].iter().zip(&gv[sl.clone()]).map(|(&a, &g)| a * g).sum();
            let sp: T = pv[sl.clone()].iter().copied().sum();
            let sg: T = gv[sl].iter().copied().sum();
            acc += (T::from_f64(2.0) * inter + eps) / (sp + sg + eps);
        }
        let value = Tensor::scalar(T::one() - acc / T::from_usize(b * c));
        self.push(
            "dice_loss",
            value,
            Op::Dice {
                p,
                target: target.clone(),
            },
            &[p],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.tracked {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    /// Accumulates into the gradient slot of `v` when `v` is tracked.
    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, tb } => {
                let bv = self.value(b).data();
                if let Some(da) = self.acc(grads, a) {
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    kernels::matmul(gd, bv, da, m, n, k, false, !tb, true);
                }
                let av = self.value(a).data();
                if let Some(db) = self.acc(grads, b) {
                    if tb {
                        // C = A·Bᵀ → dB = dCᵀ · A
                        kernels::matmul(gd, av, db, n, m, k, true, false, true);
                    } else {
                        kernels::matmul(av, gd, db, k, m, n, true, false, true);
                    }
                }
            }
            &Op::Transpose { x } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                if let Some(dx) = self.acc(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = self.acc(grads, x) {
                    add_into(dx, gd);
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = self.acc(grads, a) {
                    add_into(da, gd);
                }
                if let Some(db) = self.acc(grads, b) {
                    add_into(db, gd);
                }
            }
            &Op::Mul { a, b } => {
                let bv = self.value(b).data();
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &gg), &y) in da.iter_mut().zip(gd).zip(bv) {
                        *d += gg * y;
                    }
                }
                let av = self.value(a).data();
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &gg), &x) in db.iter_mut().zip(gd).zip(av) {
                        *d += gg * x;
                    }
                }
            }
            &Op::Scale { x, s } => {
                if let Some(dx) = self.acc(grads, x) {
                    for (d, &gg) in dx.iter_mut().zip(gd) {
                        *d += gg * s;
                    }
                }
            }
            &Op::AddRowBias { x, b } => {
                if let Some(dx) = self.acc(grads, x) {
                    add_into(dx, gd);
                }
                if let Some(db) = self.acc(grads, b) {
                    let m = db.len();
                    for row in gd.chunks(m) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                if let Some(dx) = self.acc(grads, x) {
                    for ((d, &gg), &v) in dx.iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = sizes_of(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let a = self.shape(p)[*axis];
                    if let Some(dp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + a) * inner];
                            add_into(&mut dp[o * a * inner..(o + 1) * a * inner], src);
                        }
                    }
                    offset += a;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, a, inner) = sizes_of(self.shape(x), axis);
                let len = g.shape()[axis];
                if let Some(dx) = self.acc(grads, x) {
                    for o in 0..outer {
                        let off = (o * a + start) * inner;
                        add_into(&mut dx[off..off + len * inner], &gd[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            &Op::Softmax { x, outer, axis, inner } => {
                let y = node.value.data();
                if let Some(dx) = self.acc(grads, x) {
                    kernels::softmax_backward(outer, axis, inner, y, gd, dx);
                }
            }
            &Op::Conv2d { x, w, b, ref geom } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                // acc() borrows grads mutably, so gradients are taken out and
                // put back to obtain three disjoint slots.
                let mut dx = self.take_slot(grads, x);
                let mut dw = self.take_slot(grads, w);
                let mut db = b.and_then(|b| self.take_slot(grads, b));
                kernels::conv2d_backward(
                    geom,
                    xv,
                    wv,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if dx.is_some() {
                    grads[x.0] = dx;
                }
                if dw.is_some() {
                    grads[w.0] = dw;
                }
                if let (Some(b), Some(t)) = (b, db) {
                    grads[b.0] = Some(t);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (&i, &gg) in argmax.iter().zip(gd) {
                        dx[i as usize] += gg;
                    }
                }
            }
            Op::Resize { x, planes, hw, ty, tx } => {
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::resize_backward(*planes, *hw, ty, tx, gd, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                hw,
                training,
            } => {
                let (hw, training) = (*hw, *training);
                let c = self.shape(*gamma)[0];
                let b = xhat.len() / (c * hw);
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            sum_dy[ch] += gd[i];
                            sum_dy_xhat[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if let Some(dgamma) = self.acc(grads, *gamma) {
                    add_into(dgamma, &sum_dy_xhat);
                }
                if let Some(dbeta) = self.acc(grads, *beta) {
                    add_into(dbeta, &sum_dy);
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let n = T::from_usize(b * hw);
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            if training {
                                let m1 = sum_dy[ch] / n;
                                let m2 = sum_dy_xhat[ch] / n;
                                for i in off..off + hw {
                                    dx[i] += k * (gd[i] - m1 - xhat[i] * m2);
                                }
                            } else {
                                for i in off..off + hw {
                                    dx[i] += k * gd[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::RoiAlign { x, taps } => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let hw = h * w;
                if let Some(dx) = self.acc(grads, *x) {
                    for (t, tap) in taps.iter().enumerate() {
                        for ch in 0..c {
                            let gg = gd[t * c + ch];
                            for &(i, wt) in tap {
                                dx[ch * hw + i] += wt * gg;
                            }
                        }
                    }
                }
            }
            Op::ScatterMean { updates, index, counts } => {
                let hw = counts.len();
                let channels = g.len() / hw;
                for (&u, idx) in updates.iter().zip(index) {
                    if let Some(du) = self.acc(grads, u) {
                        for (t, &p) in idx.iter().enumerate() {
                            let inv = T::one() / T::from_usize(counts[p] as usize);
                            for ch in 0..channels {
                                du[t * channels + ch] += gd[ch * hw + p] * inv;
                            }
                        }
                    }
                }
            }
            &Op::Sum { x, scale } => {
                let s = gd[0] * scale;
                if let Some(dx) = self.acc(grads, x) {
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::L1Mean { p, target } => {
                let pv = self.value(*p).data();
                let s = gd[0] / T::from_usize(target.len());
                if let Some(dp) = self.acc(grads, *p) {
                    for ((d, &a), &t) in dp.iter_mut().zip(pv).zip(target.data()) {
                        if a > t {
                            *d += s;
                        } else if a < t {
                            *d -= s;
                        }
                    }
                }
            }
            Op::CrossEntropy { p, picks } => {
                let pv = self.value(*p).data();
                let s = gd[0] / T::from_usize(picks.len());
                let clamp = T::from_f64(CE_CLAMP);
                if let Some(dp) = self.acc(grads, *p) {
                    for &i in picks {
                        if pv[i] > clamp {
                            dp[i] -= s / pv[i];
                        }
                    }
                }
            }
            Op::Dice { p, target } => {
                let pv = self.value(*p).data();
                let gv = target.data();
                let hw = target.shape()[target.rank() - 1] * target.shape()[target.rank() - 2];
                let groups = gv.len() / hw;
                let eps = T::from_f64(DICE_EPS);
                let two = T::from_f64(2.0);
                let s = -gd[0] / T::from_usize(groups);
                if let Some(dp) = self.acc(grads, *p) {
                    for k in 0..groups {
                        let sl = k * hw..(k + 1) * hw;
                        let inter: T = pv[sl.clone()].iter().zip(&gv[sl.clone()]).map(|(&a, &t)| a * t).sum();
                        let sp: T = pv[sl.clone()].iter().copied().sum();
                        let sg: T = gv[sl.clone()].iter().copied().sum();
                        let num = two * inter + eps;
                        let den = sp + sg + eps;
                        let inv_den2 = T::one() / (den * den);
                        for i in sl {
                            dp[i] += s * (two * gv[i] * den - num) * inv_den2;
                        }
                    }
                }
            }
        }
    }

    fn take_slot(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Option<Tensor<T>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape())))
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
