//! Raw numeric kernels shared by the tape's forward and backward rules.
//!
//! Feature maps are NCHW. All kernels write into caller-provided buffers
//! and assume shapes were validated by the caller.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// `c[m×n] = a[m×k] · b[k×n]` with optional transposed operands.
///
/// With `ta`, `a` is stored as `k×m`; with `tb`, `b` is stored as `n×k`.
pub fn matmul<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

/// Geometry of a same-padded stride-1 convolution with an odd square kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfolds one CHW image into a `(C·k·k) × (H·W)` column matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (h, w, k, p) = (g.height, g.width, g.kernel, g.pad());
    let hw = g.plane();
    for ci in 0..g.c_in {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                // valid output columns: 0 <= ox + kx - p < w
                let x0 = p.saturating_sub(kx);
                let x1 = (w + p).saturating_sub(kx).min(w);
                for oy in 0..h {
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    let sy = oy as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        line.fill(T::zero());
                        continue;
                    }
                    let sy = sy as usize;
                    line[..x0].fill(T::zero());
                    line[x1..].fill(T::zero());
                    let sx0 = x0 + kx - p;
                    let sx1 = x1 + kx - p;
                    line[x0..x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back and accumulates into `dx`.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (h, w, k, p) = (g.height, g.width, g.kernel, g.pad());
    let hw = g.plane();
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x0 = p.saturating_sub(kx);
                let x1 = (w + p).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for oy in 0..h {
                    let sy = oy as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = x0 + kx - p;
                    let out = &mut dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (o, &v) in out.iter_mut().zip(&src[oy * w + x0..oy * w + x1]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let hw = g.plane();
    let patch = g.patch();
    let mut cols = if g.kernel == 1 { Vec::new() } else { vec![T::zero(); patch * hw] };
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        let yb = &mut y[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        let rhs: &[T] = if g.kernel == 1 {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        matmul(weight, rhs, yb, g.c_out, patch, hw, false, false, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut yb[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of a convolution.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw = g.plane();
    let patch = g.patch();
    if let Some(db) = db {
        for b in 0..g.batch {
            let dyb = &dy[b * g.c_out * hw..(b + 1) * g.c_out * hw];
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyb[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
    let mut cols = if g.kernel == 1 { Vec::new() } else { vec![T::zero(); patch * hw] };
    if let Some(dw) = dw {
        for b in 0..g.batch {
            let xb = &x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
            let dyb = &dy[b * g.c_out * hw..(b + 1) * g.c_out * hw];
            let rhs: &[T] = if g.kernel == 1 {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dW[c_out × patch] += dY[c_out × hw] · colsᵀ
            matmul(dyb, rhs, dw, g.c_out, hw, patch, false, true, true);
        }
    }
    if let Some(dx) = dx {
        for b in 0..g.batch {
            let dyb = &dy[b * g.c_out * hw..(b + 1) * g.c_out * hw];
            let dxb = &mut dx[b * g.c_in * hw..(b + 1) * g.c_in * hw];
            if g.kernel == 1 {
                matmul(weight, dyb, dxb, patch, g.c_out, hw, true, false, true);
            } else {
                matmul(weight, dyb, &mut cols, patch, g.c_out, hw, true, false, false);
                col2im(g, &cols, dxb);
            }
        }
    }
}

/// 2×2 stride-2 max pooling over `planes` maps of size `h×w`.
///
/// Returns the flat input index of each selected element; ties go to the
/// first element in row-major order.
pub fn maxpool2x2_forward<T: Real>(planes: usize, h: usize, w: usize, x: &[T], y: &mut [T]) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + 2 * i * w + 2 * j;
                let mut best = x[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = p * oh * ow + i * ow + j;
                y[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    arg
}

/// One-dimensional bilinear sampling table with half-pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl AxisTable {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w_hi = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (libm::floor(src) as usize).min(n_in - 1);
            let h = (l + 1).min(n_in - 1);
            lo.push(l);
            hi.push(h);
            w_hi.push(if h == l { 0.0 } else { src - l as f64 });
        }
        Self { lo, hi, w_hi }
    }
}

pub fn resize_forward<T: Real>(
    planes: usize,
    (h, w): (usize, usize),
    ty: &AxisTable,
    tx: &AxisTable,
    x: &[T],
    y: &mut [T],
) {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let wy1 = T::from_f64(ty.w_hi[i]);
            let wy0 = T::one() - wy1;
            let (r0, r1) = (ty.lo[i] * w, ty.hi[i] * w);
            for j in 0..ow {
                let wx1 = T::from_f64(tx.w_hi[j]);
                let wx0 = T::one() - wx1;
                let (c0, c1) = (tx.lo[j], tx.hi[j]);
                dst[i * ow + j] = wy0 * (wx0 * src[r0 + c0] + wx1 * src[r0 + c1])
                    + wy1 * (wx0 * src[r1 + c0] + wx1 * src[r1 + c1]);
            }
        }
    }
}

pub fn resize_backward<T: Real>(
    planes: usize,
    (h, w): (usize, usize),
    ty: &AxisTable,
    tx: &AxisTable,
    dy: &[T],
    dx: &mut [T],
) {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let wy1 = T::from_f64(ty.w_hi[i]);
            let wy0 = T::one() - wy1;
            let (r0, r1) = (ty.lo[i] * w, ty.hi[i] * w);
            for j in 0..ow {
                let wx1 = T::from_f64(tx.w_hi[j]);
                let wx0 = T::one() - wx1;
                let (c0, c1) = (tx.lo[j], tx.hi[j]);
                let g = src[i * ow + j];
                dst[r0 + c0] += wy0 * wx0 * g;
                dst[r0 + c1] += wy0 * wx1 * g;
                dst[r1 + c0] += wy1 * wx0 * g;
                dst[r1 + c1] += wy1 * wx1 * g;
            }
        }
    }
}

/// Softmax along the middle axis of an `outer × axis × inner` layout.
pub fn softmax_forward<T: Real>(outer: usize, axis: usize, inner: usize, x: &[T], y: &mut [T]) {
    for o in 0..outer {
        let base = o * axis * inner;
        for i in 0..inner {
            let idx = |a: usize| base + a * inner + i;
            let mut m = x[idx(0)];
            for a in 1..axis {
                m = m.max(x[idx(a)]);
            }
            let mut s = T::zero();
            for a in 0..axis {
                let e = (x[idx(a)] - m).exp();
                y[idx(a)] = e;
                s += e;
            }
            let inv = T::one() / s;
            for a in 0..axis {
                y[idx(a)] *= inv;
            }
        }
    }
}

pub fn softmax_backward<T: Real>(outer: usize, axis: usize, inner: usize, y: &[T], dy: &[T], dx: &mut [T]) {
    for o in 0..outer {
        let base = o * axis * inner;
        for i in 0..inner {
            let idx = |a: usize| base + a * inner + i;
            let dot: T = (0..axis).map(|a| y[idx(a)] * dy[idx(a)]).sum();
            for a in 0..axis {
                dx[idx(a)] += y[idx(a)] * (dy[idx(a)] - dot);
            }
        }
    }
}

/// Per-channel statistics of an NCHW tensor: `(mean, biased variance)`.
pub fn channel_stats<T: Real>(b: usize, c: usize, hw: usize, x: &[T]) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            s += x[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut q = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            q += x[off..off + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / n;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_table_half_pixel_ramp() {
        let t = AxisTable::new(2, 4);
        let x = [0.0f64, 2.0];
        let vals: Vec<f64> = (0..4)
            .map(|i| x[t.lo[i]] * (1.0 - t.w_hi[i]) + x[t.hi[i]] * t.w_hi[i])
            .collect();
        assert_eq!(vals, vec![0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            batch: 1,
            c_in: 2,
            c_out: 1,
            height: 4,
            width: 5,
            kernel: 3,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..18 * 20).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; 18 * 20];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im(&g, &c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
