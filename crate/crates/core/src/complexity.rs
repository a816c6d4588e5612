//! Parameter and FLOP accounting.
//!
//! Measured counts come from the tape's [`FlopMeter`](crate::tape::FlopMeter)
//! during a real forward pass: 2 FLOPs per multiply-accumulate, 4 per
//! softmax element, 1 per elementwise op. The analytic window/global
//! attention formulas are evaluated exactly as published.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::blt::{nms, score_windows, tile_windows, Blt, BltConfig, EntropyMap, ScoredWindow, Window};
use crate::cgt::cross_scale_attention;
use crate::error::Result;
use crate::model::BatFormer;
use crate::nn::{tokenize, Group, Init, Linear, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// `k·(6dhwC + 2d(hw)² + d²hw)`.
pub fn analytic_blt_flops(k: u128, d: u128, h: u128, w: u128, c: u128) -> u128 {
    let hw = h * w;
    k * (6 * d * hw * c + 2 * d * hw * hw + d * d * hw)
}

/// `(3/8)dHWC + (1/8)d(HW)² + (1/16)d²HW` for full-resolution `H×W`.
/// Exact whenever `HW` is a multiple of 16.
pub fn analytic_vit_flops(d: u128, h: u128, w: u128, c: u128) -> u128 {
    let n = h * w;
    (6 * d * n * c + 2 * d * n * n + d * d * n) / 16
}

/// The window formula with `k = α·HW/(hw)` and `h = H/32`, `w = W/32`:
/// `α(6dHWC + 2d(HW)²/(32·32) + d²HW)`.
pub fn analytic_blt_flops_alpha(alpha: f64, d: f64, h: f64, w: f64, c: f64) -> f64 {
    let n = h * w;
    alpha * (6.0 * d * n * c + 2.0 / (32.0 * 32.0) * d * n * n + d * d * n)
}

/// `Ω_ViT / Ω_BLT` at `k = α·HW/(hw)`, `h = H/32`, `w = W/32`.
pub fn vit_to_blt_ratio(alpha: f64, d: f64, h: f64, w: f64, c: f64) -> f64 {
    let n = h * w;
    let vit = (6.0 * d * n * c + 2.0 * d * n * n + d * d * n) / 16.0;
    vit / analytic_blt_flops_alpha(alpha, d, h, w, c)
}

/// FLOPs of one attention pipeline split into projections, the attention
/// core (scores, scaling, softmax, weighted sum) and output mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionCost {
    pub proj: u64,
    pub core: u64,
    pub mix: u64,
}

impl AttentionCost {
    /// Core cost in multiply-accumulates.
    pub fn core_macs(&self) -> f64 {
        self.core as f64 / 2.0
    }
}

/// Runs single-head windowed attention over `k` disjoint `h×w` windows of a
/// `d`-channel map and reads the meter.
pub fn measure_blt_attention(k: usize, d: usize, h: usize, w: usize) -> Result<AttentionCost> {
    let mut store = ParamStore::<f32>::new();
    let cfg = BltConfig {
        window: Some((h, w)),
        ..BltConfig::for_backbone(d / 2, 1, 2)
    };
    let cfg = BltConfig { d, ..cfg };
    let blt = {
        let mut init = Init::new(&mut store, 0);
        init.group(Group::Blt);
        Blt::new(&mut init, cfg, d)?
    };
    let (map_h, map_w) = (h * k, w);
    let windows: Vec<Window> = (0..k).map(|i| Window { x: i * h, y: 0, h, w }).collect();
    let mut f = store.bind(false, |_| false);
    let x = f.tape.constant(Tensor::from_fn(&[d, map_h, map_w], |i| ((i * 7919) % 101) as f32 / 101.0));
    blt.window_attention(&mut f, x, &windows)?;
    let m = f.tape.flops();
    Ok(AttentionCost {
        proj: m.under("proj"),
        core: m.under("attn"),
        mix: m.under("mix"),
    })
}

/// Runs single-head global self-attention over every token of the
/// half-resolution map of an `h×w` input (`HW/4` tokens of `c` channels).
pub fn measure_vit_attention(d: usize, h: usize, w: usize, c: usize) -> Result<AttentionCost> {
    let mut store = ParamStore::<f32>::new();
    let (q, k, v) = {
        let mut init = Init::new(&mut store, 0);
        (
            Linear::new(&mut init, "q", c, d, false),
            Linear::new(&mut init, "k", c, d, false),
            Linear::new(&mut init, "v", c, d, false),
        )
    };
    let mut f = store.bind(false, |_| false);
    let x = f.tape.constant(Tensor::from_fn(&[c, h / 2, w / 2], |i| ((i * 7919) % 101) as f32 / 101.0));
    let t = tokenize(&mut f.tape, x)?;
    f.tape.push_scope("proj");
    let (qv, kv, vv) = (q.forward(&mut f, t)?, k.forward(&mut f, t)?, v.forward(&mut f, t)?);
    f.tape.pop_scope();
    f.tape.push_scope("attn");
    cross_scale_attention(&mut f.tape, qv, kv, vv)?;
    f.tape.pop_scope();
    let m = f.tape.flops();
    Ok(AttentionCost {
        proj: m.under("proj"),
        core: m.under("attn"),
        mix: 0,
    })
}

/// Windows for FLOP counting: the full `k_max` budget, picked by NMS on a
/// flat entropy map so the count does not depend on the input.
pub fn budget_windows(cfg: &BltConfig, h: usize, w: usize) -> Result<Vec<ScoredWindow>> {
    let (h2, w2) = (h / 2, w / 2);
    let (wh, ww) = cfg.window_for(h, w);
    let tiles = tile_windows(h2, w2, wh, ww, cfg.stride_for(wh))?;
    let flat = EntropyMap {
        h: h / 4,
        w: w / 4,
        values: vec![1.0; (h / 4) * (w / 4)],
    };
    let scores = score_windows(&tiles, &flat);
    let k = crate::blt::k_max(cfg.alpha, h2, w2, wh, ww);
    Ok(nms(&tiles, &scores, cfg.iou_threshold, k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub params_by_group: Vec<(&'static str, usize)>,
    /// Per scope path, sorted by path.
    pub flops_by_scope: Vec<(String, u64)>,
    /// Per top-level module.
    pub flops_by_module: Vec<(String, u64)>,
    pub flops: u64,
    pub windows: usize,
}

/// Counts parameters and measures the FLOPs of one forward pass of a
/// single `H×W` image (eval mode, full window budget).
pub fn cost_report<T: Real>(model: &BatFormer<T>, height: usize, width: usize) -> Result<CostReport> {
    let mut store = model.store.clone();
    let net = &model.net;
    let frozen = match &net.blt {
        Some(b) => Some(vec![budget_windows(&b.config, height, width)?]),
        None => None,
    };
    let mut f = store.bind(false, |_| false);
    let image = f.tape.constant(Tensor::from_fn(&[1, net.config.in_channels, height, width], |i| {
        T::from_f64(((i * 7919) % 251) as f64 / 251.0)
    }));
    net.forward(&mut f, image, frozen.as_deref())?;
    let meter = f.tape.flops().clone();
    drop(f);
    let flops_by_scope: Vec<(String, u64)> = meter.scopes().map(|(k, v)| (String::from(k), v)).collect();
    let mut modules: Vec<(String, u64)> = Vec::new();
    for (k, v) in &flops_by_scope {
        let top = k.split('/').next().unwrap_or("");
        match modules.iter_mut().find(|(m, _)| m == top) {
            Some(e) => e.1 += v,
            None => modules.push((String::from(top), *v)),
        }
    }
    Ok(CostReport {
        height,
        width,
        params: store.num_scalars(),
        params_by_group: Group::ALL
            .iter()
            .map(|&g| (g.name(), store.num_scalars_in(g)))
            .filter(|(_, n)| *n > 0)
            .collect(),
        flops_by_scope,
        flops_by_module: modules,
        flops: meter.total(),
        windows: frozen.map_or(0, |f| f[0].len()),
    })
}

/// Acceptance windows for the published model size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyTargets {
    pub params: (f64, f64),
    pub gflops: (f64, f64),
    pub params_reference: f64,
    pub gflops_reference: f64,
}

impl Default for EfficiencyTargets {
    fn default() -> Self {
        Self {
            params: (0.9e6, 1.6e6),
            gflops: (2.0, 8.0),
            params_reference: 1.2e6,
            gflops_reference: 4.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub cost: CostReport,
    pub targets: EfficiencyTargets,
    pub params_ok: bool,
    pub flops_ok: bool,
}

impl EfficiencyReport {
    pub fn gflops(&self) -> f64 {
        self.cost.flops as f64 / 1e9
    }

    pub fn passed(&self) -> bool {
        self.params_ok && self.flops_ok
    }
}

pub fn efficiency_report<T: Real>(model: &BatFormer<T>, height: usize, width: usize) -> Result<EfficiencyReport> {
    let cost = cost_report(model, height, width)?;
    let t = EfficiencyTargets::default();
    let p = cost.params as f64;
    let g = cost.flops as f64 / 1e9;
    Ok(EfficiencyReport {
        params_ok: p >= t.params.0 && p <= t.params.1,
        flops_ok: g >= t.gflops.0 && g <= t.gflops.1,
        cost,
        targets: t,
    })
}

impl CostReport {
    /// `kind,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,value\n");
        let _ = writeln!(s, "input,height,{}", self.height);
        let _ = writeln!(s, "input,width,{}", self.width);
        let _ = writeln!(s, "params,total,{}", self.params);
        for (g, n) in &self.params_by_group {
            let _ = writeln!(s, "params,{g},{n}");
        }
        let _ = writeln!(s, "flops,total,{}", self.flops);
        for (k, v) in &self.flops_by_scope {
            let _ = writeln!(s, "flops,{k},{v}");
        }
        let _ = writeln!(s, "windows,count,{}", self.windows);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input          {}x{}", self.height, self.width);
        let _ = writeln!(s, "{:<14} {:>14}", "group", "params");
        for (g, n) in &self.params_by_group {
            let _ = writeln!(s, "{g:<14} {n:>14}");
        }
        let _ = writeln!(s, "{:<14} {:>14}", "total", self.params);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<14} {:>14} {:>7}", "module", "flops", "share");
        for (m, v) in &self.flops_by_module {
            let share = 100.0 * *v as f64 / self.flops.max(1) as f64;
            let _ = writeln!(s, "{m:<14} {v:>14} {share:>6.1}%");
        }
        let _ = writeln!(s, "{:<14} {:>14}", "total", self.flops);
        s
    }
}

impl EfficiencyReport {
    pub fn to_table(&self) -> String {
        let mut s = self.cost.to_table();
        let t = &self.targets;
        let verdict = |ok: bool| if ok { "pass" } else { "fail" };
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "params  {:>8.3}M  window [{:.1}M, {:.1}M]  reference {:.1}M  {}",
            self.cost.params as f64 / 1e6,
            t.params.0 / 1e6,
            t.params.1 / 1e6,
            t.params_reference / 1e6,
            verdict(self.params_ok)
        );
        let _ = writeln!(
            s,
            "gflops  {:>8.3}   window [{:.1}, {:.1}]  reference {:.1}  {}",
            self.gflops(),
            t.gflops.0,
            t.gflops.1,
            t.gflops_reference,
            verdict(self.flops_ok)
        );
        s
    }
}

/// Text summary of the analytic comparison at one configuration.
pub fn analytic_summary(alpha: f64, d: u128, h: u128, w: u128, c: u128) -> String {
    let (wh, ww) = (h / 32, w / 32);
    let k = libm::ceil(alpha * (h * w) as f64 / (wh * ww) as f64) as u128;
    format!(
        "window attention {}  global attention {}  ratio {:.2}",
        analytic_blt_flops(k, d, wh, ww, c),
        analytic_vit_flops(d, h, w, c),
        vit_to_blt_ratio(alpha, d as f64, h as f64, w as f64, c as f64)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::nn::Conv;
    use crate::tape::Tape;

    #[test]
    fn unit_parameter_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(&mut store, 0);
        let conv = Conv::new(&mut init, "c", 1, 8, 3);
        assert_eq!(conv.num_params(), 80);
        let cbr = crate::nn::ConvBnRelu::new(&mut init, "b", 1, 8);
        assert_eq!(cbr.num_params() - cbr.conv.num_params(), 16);
        drop(init);
        assert_eq!(store.num_scalars(), 80 + 80 + 16);
    }

    #[test]
    fn counted_flops_follow_conventions() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops().total(), 48);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 16, 64, 64]));
        let w = tape.constant(Tensor::zeros(&[16, 16, 3, 3]));
        tape.conv2d(x, w, None).unwrap();
        assert_eq!(tape.flops().total(), 18_874_368);
    }

    #[test]
    fn analytic_examples() {
        assert_eq!(analytic_blt_flops(1, 1, 1, 1, 1), 9);
        assert_eq!(analytic_blt_flops(4, 32, 8, 8, 16), 2_097_152);
        // d = 32, H = W = 64, C = 16 evaluated term by term
        let n = 64.0 * 64.0;
        let want = 3.0 / 8.0 * 32.0 * n * 16.0 + 32.0 * n * n / 8.0 + 32.0 * 32.0 * n / 16.0;
        assert_eq!(analytic_vit_flops(32, 64, 64, 16) as f64, want);
    }

    #[test]
    fn rewritten_window_formula_agrees_with_k_form() {
        // k = α·HW/(hw), h = H/32, w = W/32
        for (alpha, h) in [(0.5, 256u128), (1.0, 512), (0.25, 1024)] {
            let (wh, k) = (h / 32, (alpha * ((h * h) as f64) / ((h / 32) * (h / 32)) as f64) as u128);
            let direct = analytic_blt_flops(k, 32, wh, wh, 16) as f64;
            let rewritten = analytic_blt_flops_alpha(alpha, 32.0, h as f64, h as f64, 16.0);
            assert!((direct - rewritten).abs() / direct < 1e-12);
        }
    }

    #[test]
    fn ratio_tends_to_sixty_four_over_alpha() {
        let mut prev = 0.0;
        for side in [64.0, 256.0, 1024.0] {
            let r = vit_to_blt_ratio(1.0, 32.0, side, side, 16.0);
            assert!(r > prev);
            prev = r;
        }
        assert!(prev >= 64.0 * 0.9, "{prev}");
        let far = vit_to_blt_ratio(0.5, 32.0, 1e6, 1e6, 16.0);
        assert!((far - 128.0).abs() / 128.0 < 1e-3);
    }

    #[test]
    fn measured_attention_core_matches_formulas() {
        for d in [32usize, 64] {
            let (k, h, w) = (3, 8, 8);
            let m = measure_blt_attention(k, d, h, w).unwrap();
            let hw = (h * w) as f64;
            let core = (k as f64) * 2.0 * d as f64 * hw * hw;
            assert!((m.core_macs() - core).abs() / core < 0.05, "{d}: {m:?}");
            // projections: three C→d maps per token
            assert_eq!(m.proj as f64, 6.0 * (k * d) as f64 * hw * d as f64);
            assert_eq!(m.mix as f64, 2.0 * (k * d * d) as f64 * hw);
        }
        let m = measure_vit_attention(64, 64, 64, 32).unwrap();
        let n = 64.0 * 64.0;
        let core = 64.0 * n * n / 8.0;
        assert!((m.core_macs() - core).abs() / core < 0.05);
    }

    #[test]
    fn parameter_count_scales_superlinearly() {
        let p = |c: usize| {
            BatFormer::<f32>::new(
                ModelConfig {
                    base_channels: c,
                    ..ModelConfig::default()
                },
                0,
            )
            .unwrap()
            .num_params() as f64
        };
        assert!(p(8) > 2.0 * p(4));
        assert!(p(16) > 2.0 * p(8));
    }

    #[test]
    fn report_is_consistent() {
        let m = BatFormer::<f32>::new(
            ModelConfig {
                base_channels: 4,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let r = cost_report(&m, 64, 64).unwrap();
        assert_eq!(r.flops, r.flops_by_scope.iter().map(|s| s.1).sum::<u64>());
        assert_eq!(r.flops, r.flops_by_module.iter().map(|s| s.1).sum::<u64>());
        assert_eq!(r.params, r.params_by_group.iter().map(|s| s.1).sum::<usize>());
        assert_eq!(r.windows, 16);
        assert_eq!(r, cost_report(&m, 64, 64).unwrap());
        let b = BatFormer::<f32>::new(
            ModelConfig {
                base_channels: 4,
                variant: Variant::BackboneOnly,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        assert!(cost_report(&b, 64, 64).unwrap().flops < r.flops);
    }
}
