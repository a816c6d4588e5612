//! Boundary-aware local transformer.
//!
//! The per-pixel entropy of the global branch's class probabilities marks
//! uncertain (boundary) regions. Densely tiled windows on the `F2` grid are
//! scored by their mean entropy, pruned by greedy non-maximum suppression,
//! and only the surviving windows go through multi-head self-attention.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::FeaturePyramid;
use crate::cgt::{cross_scale_attention, sample, stack};
use crate::error::{shape_err, Error, Result};
use crate::nn::{detokenize, tokenize, Ffn, Forward, Head, Init, Linear};
use crate::real::Real;
use crate::tape::{RoiBox, Var};
use crate::tensor::Tensor;

/// Normalized per-pixel entropy in `[0, 1]`, row-major `h×w`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl EntropyMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }
}

/// Entropy of a `c×h×w` probability map, normalized by `log₂ c`.
pub fn entropy_map<T: Real>(probs: &[T], c: usize, h: usize, w: usize) -> Result<EntropyMap> {
    if c < 2 {
        return Err(Error::Invalid(format!("entropy needs at least two classes, got {c}")));
    }
    if probs.len() != c * h * w {
        return Err(shape_err("entropy_map", format!("{} values for {c}×{h}×{w}", probs.len())));
    }
    let hw = h * w;
    let norm = libm::log2(c as f64);
    let mut values = Vec::with_capacity(hw);
    for p in 0..hw {
        let mut total = 0.0;
        let mut ent = 0.0;
        let first = probs[p];
        let mut uniform = true;
        for l in 0..c {
            uniform &= probs[l * hw + p] == first;
            let v = probs[l * hw + p].as_f64();
            if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                return Err(Error::Invalid(format!("probability {v} outside [0, 1]")));
            }
            total += v;
            if v > 0.0 {
                ent -= v * libm::log2(v);
            }
        }
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::Invalid(format!("class probabilities sum to {total}")));
        }
        values.push(if uniform { 1.0 } else { (ent / norm).clamp(0.0, 1.0) });
    }
    Ok(EntropyMap { h, w, values })
}

/// Axis-aligned window on the `F2` grid. `x` is the row and `y` the column
/// of the upper-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.x && i < self.x + self.h && j >= self.y && j < self.y + self.w
    }

    pub fn roi(&self) -> RoiBox {
        RoiBox {
            top: self.x as f64,
            left: self.y as f64,
            rows: self.h,
            cols: self.w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredWindow {
    pub window: Window,
    pub score: f64,
}

pub fn iou(a: &Window, b: &Window) -> f64 {
    let rows = (a.x + a.h).min(b.x + b.h).saturating_sub(a.x.max(b.x));
    let cols = (a.y + a.w).min(b.y + b.w).saturating_sub(a.y.max(b.y));
    let inter = (rows * cols) as f64;
    inter / ((a.area() + b.area()) as f64 - inter)
}

fn positions(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = extent - size;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Dense tiling at the given stride, plus edge-flushed windows so the last
/// row and column are covered. Ordered by `(x, y)`.
pub fn tile_windows(h2: usize, w2: usize, h: usize, w: usize, stride: usize) -> Result<Vec<Window>> {
    if h == 0 || w == 0 || h > h2 || w > w2 {
        return Err(shape_err("tile_windows", format!("window {h}×{w} does not fit {h2}×{w2}")));
    }
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let ys = positions(w2, w, stride);
    Ok(positions(h2, h, stride)
        .into_iter()
        .flat_map(|x| ys.iter().map(move |&y| Window { x, y, h, w }))
        .collect())
}

/// Mean entropy over the `⌊h/2⌋×⌊w/2⌋` block at `(⌊x/2⌋, ⌊y/2⌋)`. The block
/// is clipped to the map; the flag reports clipping.
pub fn score_window(win: &Window, entropy: &EntropyMap) -> (f64, bool) {
    let (r0, c0) = (win.x / 2, win.y / 2);
    let (bh, bw) = ((win.h / 2).max(1), (win.w / 2).max(1));
    let r1 = (r0 + bh).min(entropy.h);
    let c1 = (c0 + bw).min(entropy.w);
    let clipped = r1 - r0.min(r1) < bh || c1 - c0.min(c1) < bw;
    if r0 >= r1 || c0 >= c1 {
        return (0.0, true);
    }
    let mut sum = 0.0;
    for i in r0..r1 {
        for v in &entropy.values[i * entropy.w + c0..i * entropy.w + c1] {
            sum += v;
        }
    }
    (sum / ((r1 - r0) * (c1 - c0)) as f64, clipped)
}

pub fn score_windows(windows: &[Window], entropy: &EntropyMap) -> Vec<f64> {
    windows.iter().map(|w| score_window(w, entropy).0).collect()
}

/// Greedy non-maximum suppression: take the best remaining window, drop
/// every window overlapping it with IoU above the threshold, repeat until
/// `k_max` windows are kept. Equal scores are ordered by `(x, y)`.
pub fn nms(windows: &[Window], scores: &[f64], iou_threshold: f64, k_max: usize) -> Vec<ScoredWindow> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| (windows[a].x, windows[a].y).cmp(&(windows[b].x, windows[b].y)))
    });
    let mut kept: Vec<ScoredWindow> = Vec::new();
    for i in order {
        if kept.len() >= k_max {
            break;
        }
        let w = windows[i];
        if kept.iter().all(|k| iou(&k.window, &w) <= iou_threshold) {
            kept.push(ScoredWindow {
                window: w,
                score: scores[i],
            });
        }
    }
    kept
}

/// `⌈α·H2·W2/(h·w)⌉`.
pub fn k_max(alpha: f64, h2: usize, w2: usize, h: usize, w: usize) -> usize {
    libm::ceil(alpha * (h2 * w2) as f64 / (h * w) as f64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BltConfig {
    /// Transformer width; must equal the `F2` channel count.
    pub d: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Window size on the `F2` grid; `None` means `max(H/32, 4)`.
    pub window: Option<(usize, usize)>,
    /// Tiling stride; `None` means half the window height.
    pub stride: Option<usize>,
    pub alpha: f64,
    pub iou_threshold: f64,
}

impl BltConfig {
    pub fn for_backbone(base_channels: usize, heads: usize, num_classes: usize) -> Self {
        Self {
            d: 2 * base_channels,
            heads,
            num_classes,
            window: None,
            stride: None,
            alpha: 0.25,
            iou_threshold: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || self.num_classes == 0 {
            return Err(Error::Config("blt needs positive width, heads and classes".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("iou threshold {} outside (0, 1]", self.iou_threshold)));
        }
        if self.window.is_some_and(|(h, w)| h == 0 || w == 0) || self.stride == Some(0) {
            return Err(Error::Config("window size and stride must be positive".into()));
        }
        Ok(())
    }

    /// Window size for a full-resolution `h×w` input, clipped to the `F2`
    /// grid.
    pub fn window_for(&self, h: usize, w: usize) -> (usize, usize) {
        let (wh, ww) = self.window.unwrap_or(((h / 32).max(4), (w / 32).max(4)));
        (wh.min(h / 2), ww.min(w / 2))
    }

    pub fn stride_for(&self, window_h: usize) -> usize {
        self.stride.unwrap_or((window_h / 2).max(1))
    }
}

/// Scores every tiled window of one sample and runs NMS.
pub fn select_windows(entropy: &EntropyMap, config: &BltConfig, h2: usize, w2: usize) -> Result<Vec<ScoredWindow>> {
    let (wh, ww) = config.window_for(2 * h2, 2 * w2);
    let windows = tile_windows(h2, w2, wh, ww, config.stride_for(wh))?;
    let scores = score_windows(&windows, entropy);
    let k = k_max(config.alpha, h2, w2, wh, ww);
    Ok(nms(&windows, &scores, config.iou_threshold, k))
}

/// Share of boundary pixels covered by at least one window, on the `F2`
/// grid. The mask is `h×w` at full resolution and sampled at even
/// coordinates. Boundary pixels have a 4-neighbour of another class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub fraction: f64,
    pub boundary_pixels: usize,
    /// The mask has no boundary; `fraction` is reported as 1.
    pub no_boundary: bool,
}

pub fn boundary_coverage(windows: &[Window], mask: &[u8], h: usize, w: usize) -> Result<Coverage> {
    if mask.len() != h * w || h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("boundary_coverage", format!("mask of {} for {h}×{w}", mask.len())));
    }
    let (h2, w2) = (h / 2, w / 2);
    let m = |i: usize, j: usize| mask[2 * i * w + 2 * j];
    let mut boundary = 0;
    let mut covered = 0;
    for i in 0..h2 {
        for j in 0..w2 {
            let l = m(i, j);
            let edge = (i > 0 && m(i - 1, j) != l)
                || (i + 1 < h2 && m(i + 1, j) != l)
                || (j > 0 && m(i, j - 1) != l)
                || (j + 1 < w2 && m(i, j + 1) != l);
            if edge {
                boundary += 1;
                if windows.iter().any(|win| win.contains(i, j)) {
                    covered += 1;
                }
            }
        }
    }
    Ok(if boundary == 0 {
        Coverage {
            fraction: 1.0,
            boundary_pixels: 0,
            no_boundary: true,
        }
    } else {
        Coverage {
            fraction: covered as f64 / boundary as f64,
            boundary_pixels: boundary,
            no_boundary: false,
        }
    })
}

#[derive(Debug, Clone)]
struct AttnHead {
    query: Linear,
    key: Linear,
    value: Linear,
}

/// Features and probabilities at `H/2×W/2`, plus the windows used per sample.
#[derive(Debug, Clone)]
pub struct BltOutput {
    pub features: Var,
    pub probs: Var,
    pub windows: Vec<Vec<ScoredWindow>>,
}

#[derive(Debug, Clone)]
pub struct Blt {
    pub config: BltConfig,
    heads: Vec<AttnHead>,
    pub combine: Linear,
    pub ffn: Ffn,
    pub head: Head,
}

impl Blt {
    /// `c2` is the `F2` channel count.
    pub fn new<T: Real>(init: &mut Init<'_, T>, config: BltConfig, c2: usize) -> Result<Self> {
        config.validate()?;
        if config.d != c2 {
            return Err(Error::Config(format!(
                "blt width {} must equal the F2 channel count {c2}",
                config.d
            )));
        }
        let heads = (0..config.heads)
            .map(|h| AttnHead {
                query: Linear::new(init, &format!("blt.q{h}"), c2, config.d, false),
                key: Linear::new(init, &format!("blt.k{h}"), c2, config.d, false),
                value: Linear::new(init, &format!("blt.v{h}"), c2, config.d, false),
            })
            .collect();
        let combine = Linear::new(init, "blt.combine", config.heads * config.d, config.d, false);
        let ffn = Ffn::new(init, "blt.ffn", config.d);
        let head = Head::new(init, "head.blt", config.d, config.num_classes);
        Ok(Self {
            config,
            heads,
            combine,
            ffn,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.query.num_params() + h.key.num_params() + h.value.num_params())
            .sum::<usize>()
            + self.combine.num_params()
            + self.ffn.up.num_params()
            + self.ffn.down.num_params()
            + self.head.conv.num_params()
    }

    /// Windowed attention on one `d×H2×W2` map: per-window multi-head
    /// attention, count-averaged scatter back and a global residual.
    pub fn window_attention<T: Real>(&self, f: &mut Forward<'_, T>, f2: Var, windows: &[Window]) -> Result<Var> {
        let (c, h2, w2) = match *f.tape.shape(f2) {
            [c, h, w] => (c, h, w),
            ref s => return Err(shape_err("window_attention", format!("F2 must be CHW, got {s:?}"))),
        };
        if windows.is_empty() {
            return Ok(f2);
        }
        let mut updates = Vec::with_capacity(windows.len());
        for win in windows {
            let tokens = f.tape.roi_align(f2, win.roi())?;
            let mut outs = Vec::with_capacity(self.heads.len());
            for head in &self.heads {
                f.tape.push_scope("proj");
                let q = head.query.forward(f, tokens)?;
                let k = head.key.forward(f, tokens)?;
                let v = head.value.forward(f, tokens)?;
                f.tape.pop_scope();
                f.tape.push_scope("attn");
                let o = cross_scale_attention(&mut f.tape, q, k, v);
                f.tape.pop_scope();
                outs.push(o?);
            }
            f.tape.push_scope("mix");
            let cat = if outs.len() == 1 { outs[0] } else { f.tape.concat(&outs, 1)? };
            let u = self.combine.forward(f, cat);
            f.tape.pop_scope();
            updates.push(u?);
        }
        let boxes: Vec<RoiBox> = windows.iter().map(Window::roi).collect();
        let scattered = f.tape.scatter_mean(&updates, &boxes, c, h2, w2)?;
        f.tape.add(scattered, f2)
    }

    /// Windowed attention followed by the residual FFN on every `F2` token.
    pub fn forward_single<T: Real>(&self, f: &mut Forward<'_, T>, f2: Var, windows: &[Window]) -> Result<Var> {
        let (h2, w2) = {
            let s = f.tape.shape(f2);
            (s[1], s[2])
        };
        let fsa = self.window_attention(f, f2, windows)?;
        f.tape.push_scope("ffn");
        let t = tokenize(&mut f.tape, fsa)?;
        let t = self.ffn.forward(f, t)?;
        f.tape.pop_scope();
        detokenize(&mut f.tape, t, h2, w2)
    }

    /// Selects windows from the detached global-branch probabilities
    /// (`B×c×H/4×W/4`), unless `frozen` supplies them per sample.
    pub fn forward<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        pyr: &FeaturePyramid,
        cgt_probs: Var,
        frozen: Option<&[Vec<ScoredWindow>]>,
    ) -> Result<BltOutput> {
        f.tape.push_scope("blt");
        let out = self.forward_batch(f, pyr, cgt_probs, frozen);
        f.tape.pop_scope();
        out
    }

    fn forward_batch<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        pyr: &FeaturePyramid,
        cgt_probs: Var,
        frozen: Option<&[Vec<ScoredWindow>]>,
    ) -> Result<BltOutput> {
        let (b, _, h2, w2) = crate::tensor::nchw("blt", f.tape.shape(pyr.f2))?;
        let windows: Vec<Vec<ScoredWindow>> = match frozen {
            Some(ws) if ws.len() == b => ws.to_vec(),
            Some(ws) => {
                return Err(shape_err("blt", format!("{} frozen window sets for batch {b}", ws.len())));
            }
            None => {
                let p: &Tensor<T> = f.tape.value(cgt_probs);
                let (_, c, h4, w4) = crate::tensor::nchw("blt", p.shape())?;
                let plane = c * h4 * w4;
                let mut all = Vec::with_capacity(b);
                for i in 0..b {
                    let e = entropy_map(&p.data()[i * plane..(i + 1) * plane], c, h4, w4)?;
                    all.push(select_windows(&e, &self.config, h2, w2)?);
                }
                all
            }
        };
        let mut maps = Vec::with_capacity(b);
        for (i, ws) in windows.iter().enumerate() {
            let f2 = sample(&mut f.tape, pyr.f2, i)?;
            let plain: Vec<Window> = ws.iter().map(|s| s.window).collect();
            maps.push(self.forward_single(f, f2, &plain)?);
        }
        let features = stack(&mut f.tape, &maps)?;
        f.tape.push_scope("head");
        let probs = self.head.forward(f, features);
        f.tape.pop_scope();
        Ok(BltOutput {
            features,
            probs: probs?,
            windows,
        })
    }
}
