//! Cross-scale global transformer.
//!
//! Queries come from `F3` tokens, keys and values from `F4` and `F5`. Each of
//! the `g` heads per scale projects to the full width `d`; the `2g` head
//! outputs are concatenated, mixed by `W_ca` and added back onto the `F3`
//! tokens, then refined by a residual FFN.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::FeaturePyramid;
use crate::error::{shape_err, Error, Result};
use crate::nn::{detokenize, tokenize, Ffn, Forward, Head, Init, Linear};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::nchw;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CgtConfig {
    /// Transformer width; must equal the `F3` channel count.
    pub d: usize,
    /// Heads per key/value scale.
    pub heads: usize,
    pub num_classes: usize,
}

impl CgtConfig {
    pub fn for_backbone(base_channels: usize, heads: usize, num_classes: usize) -> Self {
        Self {
            d: 4 * base_channels,
            heads,
            num_classes,
        }
    }
}

/// `softmax(Q·Kᵀ/√d)·V` with a row-wise softmax.
pub fn cross_scale_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (nq, d) = match *tape.shape(q) {
        [n, d] => (n, d),
        ref s => return Err(shape_err("attention", format!("query {s:?}"))),
    };
    let ks = tape.shape(k).to_vec();
    let vs = tape.shape(v).to_vec();
    if ks.len() != 2 || ks[1] != d || vs != ks {
        return Err(shape_err("attention", format!("query {nq}×{d}, keys {ks:?}, values {vs:?}")));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::one() / T::from_usize(d).sqrt())?;
    let attn = tape.softmax(scores, 1)?;
    tape.matmul(attn, v)
}

/// One `C×H×W` slice of a batched map.
pub fn sample<T: Real>(tape: &mut Tape<T>, x: Var, index: usize) -> Result<Var> {
    let (_, c, h, w) = nchw("sample", tape.shape(x))?;
    let one = tape.narrow(x, 0, index, 1)?;
    tape.reshape(one, &[c, h, w])
}

/// Stacks `C×H×W` maps into `B×C×H×W`.
pub fn stack<T: Real>(tape: &mut Tape<T>, maps: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(maps.len());
    for &m in maps {
        let s = tape.shape(m).to_vec();
        let mut shape = Vec::with_capacity(4);
        shape.push(1);
        shape.extend_from_slice(&s);
        parts.push(tape.reshape(m, &shape)?);
    }
    tape.concat(&parts, 0)
}

/// Concatenates head outputs along the width, projects them with `W_ca`
/// (no bias) and adds the residual.
pub fn combine_heads<T: Real>(
    f: &mut Forward<'_, T>,
    heads: &[Var],
    w_ca: &Linear,
    residual: Var,
) -> Result<Var> {
    let width: usize = heads.iter().map(|&h| f.tape.shape(h)[1]).sum();
    if width != w_ca.d_in {
        return Err(shape_err(
            "combine_heads",
            format!("{} heads of total width {width}, combiner expects {}", heads.len(), w_ca.d_in),
        ));
    }
    let cat = f.tape.concat(heads, 1)?;
    let mixed = w_ca.forward(f, cat)?;
    f.tape.add(mixed, residual)
}

#[derive(Debug, Clone)]
struct ScaleHeads {
    query: Vec<Linear>,
    key: Vec<Linear>,
    value: Vec<Linear>,
}

impl ScaleHeads {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, q_in: usize, kv_in: usize, cfg: &CgtConfig) -> Self {
        let mk = |init: &mut Init<'_, T>, role: &str, c_in: usize| -> Vec<Linear> {
            (0..cfg.heads)
                .map(|h| Linear::new(init, &format!("{name}.{role}{h}"), c_in, cfg.d, false))
                .collect()
        };
        Self {
            query: mk(init, "q", q_in),
            key: mk(init, "k", kv_in),
            value: mk(init, "v", kv_in),
        }
    }

    fn num_params(&self) -> usize {
        self.query.iter().chain(&self.key).chain(&self.value).map(|l| l.num_params()).sum()
    }
}

/// Features and class probabilities at `H/4×W/4`.
#[derive(Debug, Clone, Copy)]
pub struct CgtOutput {
    pub features: Var,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct Cgt {
    pub config: CgtConfig,
    scale4: ScaleHeads,
    scale5: ScaleHeads,
    pub combine: Linear,
    pub ffn: Ffn,
    pub head: Head,
}

impl Cgt {
    /// `c3`, `c4`, `c5` are the channel counts of `F3`, `F4`, `F5`.
    pub fn new<T: Real>(init: &mut Init<'_, T>, config: CgtConfig, c3: usize, c4: usize, c5: usize) -> Result<Self> {
        if config.heads == 0 || config.num_classes == 0 {
            return Err(Error::Config("cgt needs at least one head and one class".into()));
        }
        if config.d != c3 {
            return Err(Error::Config(format!(
                "cgt width {} must equal the F3 channel count {c3}",
                config.d
            )));
        }
        let scale4 = ScaleHeads::new(init, "cgt.s4", c3, c4, &config);
        let scale5 = ScaleHeads::new(init, "cgt.s5", c3, c5, &config);
        let combine = Linear::new(init, "cgt.combine", 2 * config.heads * config.d, config.d, false);
        let ffn = Ffn::new(init, "cgt.ffn", config.d);
        let head = Head::new(init, "head.cgt", config.d, config.num_classes);
        Ok(Self {
            config,
            scale4,
            scale5,
            combine,
            ffn,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.scale4.num_params()
            + self.scale5.num_params()
            + self.combine.num_params()
            + self.ffn.up.num_params()
            + self.ffn.down.num_params()
            + self.head.conv.num_params()
    }

    /// Runs the transformer on one sample's `F3`, `F4`, `F5` (CHW) and
    /// returns the `d×H/4×W/4` feature map.
    pub fn forward_single<T: Real>(&self, f: &mut Forward<'_, T>, f3: Var, f4: Var, f5: Var) -> Result<Var> {
        let (h3, w3) = match *f.tape.shape(f3) {
            [_, h, w] => (h, w),
            ref s => return Err(shape_err("cgt", format!("F3 must be CHW, got {s:?}"))),
        };
        let t3 = tokenize(&mut f.tape, f3)?;
        let t4 = tokenize(&mut f.tape, f4)?;
        let t5 = tokenize(&mut f.tape, f5)?;
        let mut outs = Vec::with_capacity(2 * self.config.heads);
        for (heads, kv) in [(&self.scale4, t4), (&self.scale5, t5)] {
            for h in 0..self.config.heads {
                f.tape.push_scope("proj");
                let q = heads.query[h].forward(f, t3)?;
                let k = heads.key[h].forward(f, kv)?;
                let v = heads.value[h].forward(f, kv)?;
                f.tape.pop_scope();
                f.tape.push_scope("attn");
                let o = cross_scale_attention(&mut f.tape, q, k, v);
                f.tape.pop_scope();
                outs.push(o?);
            }
        }
        f.tape.push_scope("mix");
        let fca = combine_heads(f, &outs, &self.combine, t3)?;
        let out = self.ffn.forward(f, fca)?;
        f.tape.pop_scope();
        detokenize(&mut f.tape, out, h3, w3)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, pyr: &FeaturePyramid) -> Result<CgtOutput> {
        f.tape.push_scope("cgt");
        let out = self.forward_batch(f, pyr);
        f.tape.pop_scope();
        out
    }

    fn forward_batch<T: Real>(&self, f: &mut Forward<'_, T>, pyr: &FeaturePyramid) -> Result<CgtOutput> {
        let b = f.tape.shape(pyr.f3)[0];
        let mut maps = Vec::with_capacity(b);
        for i in 0..b {
            let f3 = sample(&mut f.tape, pyr.f3, i)?;
            let f4 = sample(&mut f.tape, pyr.f4, i)?;
            let f5 = sample(&mut f.tape, pyr.f5, i)?;
            maps.push(self.forward_single(f, f3, f4, f5)?);
        }
        let features = stack(&mut f.tape, &maps)?;
        f.tape.push_scope("head");
        let probs = self.head.forward(f, features);
        f.tape.pop_scope();
        Ok(CgtOutput { features, probs: probs? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::nn::{Group, ParamStore};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn brute_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
        let (nq, d) = (q.shape()[0], q.shape()[1]);
        let nk = k.shape()[0];
        let mut out = alloc::vec![0.0; nq * d];
        for i in 0..nq {
            let s: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|t| q.at(&[i, t]) * k.at(&[j, t])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                out[i * d + t] = (0..nk).map(|j| e[j] / z * v.at(&[j, t])).sum();
            }
        }
        out
    }

    #[test]
    fn attention_matches_brute_force() {
        let (q, k, v) = (random(&[2, 4], 1), random(&[3, 4], 2), random(&[3, 4], 3));
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let o = cross_scale_attention(&mut tape, a, b, c).unwrap();
        let want = brute_attention(&q, &k, &v);
        for (x, y) in tape.value(o).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let (q, k, v) = (random(&[5, 3], 4), random(&[1, 3], 5), random(&[1, 3], 6));
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let o = cross_scale_attention(&mut tape, a, b, c).unwrap();
        for row in tape.value(o).data().chunks(3) {
            for (x, y) in row.iter().zip(v.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = random(&[2, 3], 7);
        let k = Tensor::from_fn(&[4, 3], |i| [0.3, -0.2, 0.9][i % 3]);
        let v = random(&[4, 3], 8);
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let o = cross_scale_attention(&mut tape, a, b, c).unwrap();
        for row in tape.value(o).data().chunks(3) {
            for t in 0..3 {
                let mean = (0..4).map(|j| v.at(&[j, t])).sum::<f64>() / 4.0;
                assert!((row[t] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_cost_is_linear_in_key_length() {
        let cost = |nk: usize| {
            let mut tape = Tape::<f64>::new();
            let q = tape.constant(random(&[64, 8], 1));
            let k = tape.constant(random(&[nk, 8], 2));
            let v = tape.constant(random(&[nk, 8], 3));
            cross_scale_attention(&mut tape, q, k, v).unwrap();
            // the 1/√d scaling touches every score once
            tape.flops().total() - (64 * nk) as u64
        };
        assert_eq!(cost(64), 4 * cost(16));
        assert_eq!(cost(64), 16 * cost(4));
    }

    #[test]
    fn empty_keys_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(random(&[2, 3], 1));
        let k = tape.constant(random(&[2, 4], 2));
        let v = tape.constant(random(&[2, 4], 3));
        assert!(cross_scale_attention(&mut tape, q, k, v).is_err());
    }

    fn build(c: usize, heads: usize, seed: u64) -> (ParamStore<f64>, Cgt) {
        let mut store = ParamStore::new();
        let cgt = {
            let mut init = Init::new(&mut store, seed);
            init.group(Group::Cgt);
            Cgt::new(&mut init, CgtConfig::for_backbone(c, heads, 3), 4 * c, 8 * c, 8 * c).unwrap()
        };
        (store, cgt)
    }

    fn zero(store: &mut ParamStore<f64>, prefix: &str) {
        for p in store.params_mut() {
            if p.name.starts_with(prefix) {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }

    #[test]
    fn zero_combiner_and_ffn_pass_f3_through() {
        let (mut store, cgt) = build(1, 2, 1);
        zero(&mut store, "cgt.combine");
        zero(&mut store, "cgt.ffn");
        let mut f = store.bind(false, |_| true);
        let f3v = random(&[4, 4, 4], 2);
        let f3 = f.tape.constant(f3v.clone());
        let f4 = f.tape.constant(random(&[8, 2, 2], 3));
        let f5 = f.tape.constant(random(&[8, 1, 1], 4));
        let out = cgt.forward_single(&mut f, f3, f4, f5).unwrap();
        assert_eq!(f.tape.value(out), &f3v);
    }

    #[test]
    fn combine_with_stacked_identity_adds_head() {
        // g = 1 per scale, both heads equal, W_ca = [I/2; I/2]
        let mut store = ParamStore::<f64>::new();
        let w = {
            let mut init = Init::new(&mut store, 0);
            Linear::new(&mut init, "w", 6, 3, false)
        };
        *store.get_mut(w.weight) = Tensor::from_fn(&[6, 3], |i| {
            let (r, c) = (i / 3, i % 3);
            if r % 3 == c { 0.5 } else { 0.0 }
        });
        let mut f = store.bind(false, |_| true);
        let head = random(&[4, 3], 1);
        let res = random(&[4, 3], 2);
        let a = f.tape.constant(head.clone());
        let b = f.tape.constant(res.clone());
        let out = combine_heads(&mut f, &[a, a], &w, b).unwrap();
        for ((o, h), r) in f.tape.value(out).data().iter().zip(head.data()).zip(res.data()) {
            assert!((o - (h + r)).abs() < 1e-15);
        }
        assert!(combine_heads(&mut f, &[a], &w, b).is_err());
    }

    #[test]
    fn head_permutation_with_matching_rows_is_invisible() {
        let mut store = ParamStore::<f64>::new();
        let w = {
            let mut init = Init::new(&mut store, 5);
            Linear::new(&mut init, "w", 6, 2, false)
        };
        let orig = store.get(w.weight).clone();
        let heads: Vec<Tensor<f64>> = (0..3).map(|i| random(&[4, 2], 10 + i)).collect();
        let res = random(&[4, 2], 20);
        let run = |store: &mut ParamStore<f64>, order: &[usize]| {
            let mut f = store.bind(false, |_| true);
            let hv: Vec<Var> = order.iter().map(|&i| f.tape.constant(heads[i].clone())).collect();
            let r = f.tape.constant(res.clone());
            let o = combine_heads(&mut f, &hv, &w, r).unwrap();
            f.tape.value(o).clone()
        };
        let base = run(&mut store, &[0, 1, 2]);
        let order = [2, 0, 1];
        // rows of head i move to the slot it now occupies
        let mut permuted = orig.clone();
        for (slot, &h) in order.iter().enumerate() {
            for r in 0..2 {
                for c in 0..2 {
                    permuted.set(&[slot * 2 + r, c], orig.at(&[h * 2 + r, c]));
                }
            }
        }
        *store.get_mut(w.weight) = permuted;
        let moved = run(&mut store, &order);
        assert!(base.max_abs_diff(&moved) < 1e-14);
    }

    #[test]
    fn ffn_with_negative_preactivation_adds_only_output_bias() {
        let (mut store, cgt) = build(1, 1, 3);
        let b1 = store.find("cgt.ffn.w1.bias").unwrap();
        let b2 = store.find("cgt.ffn.w2.bias").unwrap();
        let w1 = store.find("cgt.ffn.w1.weight").unwrap();
        *store.get_mut(w1) = Tensor::zeros(store.get(w1).shape());
        *store.get_mut(b1) = Tensor::full(&[16], -1.0);
        *store.get_mut(b2) = Tensor::new(&[4], alloc::vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let mut f = store.bind(false, |_| true);
        let x = random(&[5, 4], 1);
        let xv = f.tape.constant(x.clone());
        let y = cgt.ffn.forward(&mut f, xv).unwrap();
        for (i, (&o, &xi)) in f.tape.value(y).data().iter().zip(x.data()).enumerate() {
            let b = [0.1, -0.2, 0.3, 0.4][i % 4];
            assert!((o - (xi + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn full_cgt_gradcheck_on_sixteen_input_scale() {
        // 16×16 input gives F3 4×4, F4 2×2, F5 1×1
        let (mut store, cgt) = build(1, 2, 9);
        let n = store.params().len();
        let mut all: Vec<Tensor<f64>> = store.params().iter().map(|p| p.value.clone()).collect();
        all.extend([random(&[4, 4, 4], 1), random(&[8, 2, 2], 2), random(&[8, 1, 1], 3)]);
        let target = random(&[3, 4, 4], 4);
        let report = gradcheck(
            |tape, vars| {
                let mut f = store.bind_vars(core::mem::take(tape), vars[..n].to_vec(), false);
                let out = cgt.forward_single(&mut f, vars[n], vars[n + 1], vars[n + 2])?;
                let p = cgt.head.forward(&mut f, out)?;
                let loss = f.tape.l1_mean(p, &target)?;
                let sq = f.tape.mul(out, out)?;
                let s = f.tape.mean(sq)?;
                let loss = f.tape.add(loss, s)?;
                *tape = f.into_tape();
                Ok(loss)
            },
            &all,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
