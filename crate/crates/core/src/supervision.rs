//! Multi-scale soft supervision and the fusion head.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::nn::{ConvBnRelu, Forward, Head, Init};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Class-frequency map of `mask` (`h×w` labels) over `f×f` blocks,
/// `f = 2^(s−1)`; shape `c×(h/f)×(w/f)`.
pub fn soft_resize_mask<T: Real>(mask: &[u8], h: usize, w: usize, s: u32, c: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(Error::Invalid("scale index starts at 1".into()));
    }
    if mask.len() != h * w {
        return Err(shape_err("soft_resize_mask", format!("{} labels for {h}×{w}", mask.len())));
    }
    let f = 1usize << (s - 1);
    if h % f != 0 || w % f != 0 {
        return Err(shape_err("soft_resize_mask", format!("{h}×{w} not divisible by {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let mut counts = alloc::vec![0u32; c * oh * ow];
    for (i, row) in mask.chunks(w).enumerate() {
        for (j, &l) in row.iter().enumerate() {
            let l = l as usize;
            if l >= c {
                return Err(Error::Invalid(format!("label {l} outside 0..{c}")));
            }
            counts[(l * oh + i / f) * ow + j / f] += 1;
        }
    }
    let inv = T::one() / T::from_usize(f * f);
    Ok(Tensor::from_parts(
        alloc::vec![c, oh, ow],
        counts.into_iter().map(|n| T::from_usize(n as usize) * inv).collect(),
    ))
}

/// Soft targets at full, half and quarter resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelStack<T> {
    pub g1: Tensor<T>,
    pub g2: Tensor<T>,
    pub g3: Tensor<T>,
}

pub fn soft_label_stack<T: Real>(mask: &[u8], h: usize, w: usize, c: usize) -> Result<SoftLabelStack<T>> {
    Ok(SoftLabelStack {
        g1: soft_resize_mask(mask, h, w, 1, c)?,
        g2: soft_resize_mask(mask, h, w, 2, c)?,
        g3: soft_resize_mask(mask, h, w, 3, c)?,
    })
}

/// Batched labels and soft targets (`B×c×…`).
#[derive(Debug, Clone, PartialEq)]
pub struct Targets<T> {
    pub labels: Vec<u8>,
    pub g1: Tensor<T>,
    pub g2: Tensor<T>,
    pub g3: Tensor<T>,
}

impl<T: Real> Targets<T> {
    pub fn from_masks(masks: &[&[u8]], h: usize, w: usize, c: usize) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let b = masks.len();
        let mut labels = Vec::with_capacity(b * h * w);
        let (mut g1, mut g2, mut g3) = (Vec::new(), Vec::new(), Vec::new());
        for m in masks {
            let st = soft_label_stack::<T>(m, h, w, c)?;
            labels.extend_from_slice(m);
            g1.extend(st.g1.into_data());
            g2.extend(st.g2.into_data());
            g3.extend(st.g3.into_data());
        }
        Ok(Self {
            labels,
            g1: Tensor::from_parts(alloc::vec![b, c, h, w], g1),
            g2: Tensor::from_parts(alloc::vec![b, c, h / 2, w / 2], g2),
            g3: Tensor::from_parts(alloc::vec![b, c, h / 4, w / 4], g3),
        })
    }
}

/// Weights of the CNN, BLT, CGT and final terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cnn: f64,
    pub blt: f64,
    pub cgt: f64,
    pub fin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cnn: 0.2,
            blt: 0.1,
            cgt: 0.1,
            fin: 0.6,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.cnn, self.blt, self.cgt, self.fin]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights {w:?} must be nonnegative")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Weighted sum of already evaluated component losses.
    pub fn combine(&self, parts: [f64; 4]) -> Result<f64> {
        self.validate()?;
        Ok(self.as_array().iter().zip(parts).map(|(w, p)| w * p).sum())
    }
}

/// Mean absolute difference between a prediction and its soft target.
pub fn scale_loss<T: Real>(tape: &mut Tape<T>, p: Var, g: &Tensor<T>) -> Result<Var> {
    tape.l1_mean(p, g)
}

/// `0.5·CE + 0.5·Dice` against the hard labels.
pub fn final_loss<T: Real>(tape: &mut Tape<T>, p: Var, labels: &[u8], one_hot: &Tensor<T>) -> Result<Var> {
    let ce = tape.cross_entropy(p, labels)?;
    let dice = tape.dice_loss(p, one_hot)?;
    let s = tape.add(ce, dice)?;
    tape.scale(s, T::from_f64(0.5))
}

/// Per-scale probabilities of the full network.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub cnn: Var,
    pub blt: Var,
    pub cgt: Var,
    pub fin: Var,
}

/// Total loss and its four terms before weighting.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub terms: [Var; 4],
}

pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    heads: &HeadOutputs,
    targets: &Targets<T>,
    weights: &LossWeights,
) -> Result<LossParts> {
    weights.validate()?;
    let terms = [
        scale_loss(tape, heads.cnn, &targets.g1)?,
        scale_loss(tape, heads.blt, &targets.g2)?,
        scale_loss(tape, heads.cgt, &targets.g3)?,
        final_loss(tape, heads.fin, &targets.labels, &targets.g1)?,
    ];
    let mut total: Option<Var> = None;
    for (&t, w) in terms.iter().zip(weights.as_array()) {
        let s = tape.scale(t, T::from_f64(w))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(LossParts {
        total: total.expect("four terms"),
        terms,
    })
}

/// Fusion head: upsample the global and local branch features to full
/// resolution, concatenate with the decoder output, one CBR block to `2C`
/// and a per-pixel classifier.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub block: ConvBnRelu,
    pub head: Head,
}

impl Fusion {
    pub fn new<T: Real>(init: &mut Init<'_, T>, base_channels: usize, classes: usize, kernel: usize) -> Self {
        let c = base_channels;
        Self {
            block: ConvBnRelu::with_kernel(init, "fusion.block", 7 * c, 2 * c, kernel),
            head: Head::new(init, "fusion.head", 2 * c, classes),
        }
    }

    pub fn num_params(&self) -> usize {
        self.block.num_params() + self.head.conv.num_params()
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, decoder_out: Var, cgt: Var, blt: Var) -> Result<Var> {
        f.tape.push_scope("fusion");
        let out = self.forward_inner(f, decoder_out, cgt, blt);
        f.tape.pop_scope();
        out
    }

    fn forward_inner<T: Real>(&self, f: &mut Forward<'_, T>, decoder_out: Var, cgt: Var, blt: Var) -> Result<Var> {
        let cgt_up = f.tape.upsample(cgt, 4)?;
        let blt_up = f.tape.upsample(blt, 2)?;
        let axis = f.tape.shape(decoder_out).len() - 3;
        let cat = f.tape.concat(&[decoder_out, cgt_up, blt_up], axis)?;
        let x = self.block.forward(f, cat)?;
        self.head.forward(f, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use crate::nn::{Group, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(h: usize, w: usize, c: u8, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..h * w).map(|_| rng.random_range(0..c)).collect()
    }

    #[test]
    fn scale_one_is_one_hot() {
        let m = random_mask(4, 6, 3, 1);
        let g = soft_resize_mask::<f64>(&m, 4, 6, 1, 3).unwrap();
        for l in 0..3 {
            for p in 0..24 {
                assert_eq!(g.data()[l * 24 + p], if m[p] as usize == l { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn block_fractions() {
        let g = soft_resize_mask::<f64>(&[2; 16], 4, 4, 2, 3).unwrap();
        assert_eq!(g.at(&[2, 1, 1]), 1.0);
        let mut m = alloc::vec![0u8; 16];
        for v in m.iter_mut().take(5) {
            *v = 1;
        }
        let g = soft_resize_mask::<f64>(&m, 4, 4, 3, 2).unwrap();
        assert_eq!(g.at(&[1, 0, 0]), 0.3125);
        assert!(soft_resize_mask::<f64>(&m, 4, 4, 4, 2).is_err());
        assert!(soft_resize_mask::<f64>(&[5; 4], 2, 2, 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn soft_labels_conserve_mass(seed in 0u64..500, s in 1u32..4) {
            let m = random_mask(16, 16, 4, seed);
            let g = soft_resize_mask::<f64>(&m, 16, 16, s, 4).unwrap();
            let f = 1usize << (s - 1);
            let hw = (16 / f) * (16 / f);
            for p in 0..hw {
                let total: f64 = (0..4).map(|l| g.data()[l * hw + p]).sum();
                prop_assert_eq!(total, 1.0);
            }
            let q = (f * f) as f64;
            prop_assert!(g.data().iter().all(|v| (v * q).fract() == 0.0));
        }

        #[test]
        fn relabelling_permutes_channels(seed in 0u64..200) {
            let perm = [2u8, 0, 3, 1];
            let m = random_mask(8, 8, 4, seed);
            let pm: Vec<u8> = m.iter().map(|&l| perm[l as usize]).collect();
            let g = soft_resize_mask::<f64>(&m, 8, 8, 2, 4).unwrap();
            let gp = soft_resize_mask::<f64>(&pm, 8, 8, 2, 4).unwrap();
            for l in 0..4 {
                let pl = perm[l] as usize;
                prop_assert_eq!(&g.data()[l * 16..(l + 1) * 16], &gp.data()[pl * 16..(pl + 1) * 16]);
            }
        }

        #[test]
        fn argmax_recovers_block_majority(seed in 0u64..200) {
            let m = random_mask(8, 8, 3, seed);
            let g = soft_resize_mask::<f64>(&m, 8, 8, 2, 3).unwrap();
            for bi in 0..4 {
                for bj in 0..4 {
                    let mut counts = [0usize; 3];
                    for i in 0..2 {
                        for j in 0..2 {
                            counts[m[(2 * bi + i) * 8 + 2 * bj + j] as usize] += 1;
                        }
                    }
                    let best = *counts.iter().max().unwrap();
                    let arg = (0..3).max_by(|&a, &b| g.at(&[a, bi, bj]).total_cmp(&g.at(&[b, bi, bj])).then(b.cmp(&a))).unwrap();
                    prop_assert_eq!(counts[arg], best);
                }
            }
        }
    }

    #[test]
    fn scale_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let g = soft_resize_mask::<f64>(&[0, 1, 1, 0], 2, 2, 1, 2).unwrap();
        let p = tape.constant(g.clone());
        let l = scale_loss(&mut tape, p, &g).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let u = tape.constant(Tensor::full(&[2, 2, 2], 0.5));
        let l = scale_loss(&mut tape, u, &g).unwrap();
        // per pixel 2(c−1)/c² summed over classes, averaged over c entries
        assert!((tape.value(l).item() - 0.5).abs() < 1e-15);
        let a = Tensor::from_fn(&[2, 2, 2], |i| i as f64 / 10.0);
        let av = tape.constant(a.clone());
        let gv = tape.constant(g.clone());
        let l1 = scale_loss(&mut tape, av, &g).unwrap();
        let l2 = scale_loss(&mut tape, gv, &a).unwrap();
        assert_eq!(tape.value(l1).item(), tape.value(l2).item());
    }

    #[test]
    fn dice_examples() {
        let mut tape = Tape::<f64>::new();
        let g = soft_resize_mask::<f64>(&[0, 0, 1, 1], 2, 2, 1, 2).unwrap();
        let p = tape.constant(g.clone());
        let l = tape.dice_loss(p, &g).unwrap();
        assert!(tape.value(l).item().abs() < 1e-5);
        let swapped = soft_resize_mask::<f64>(&[1, 1, 0, 0], 2, 2, 1, 2).unwrap();
        let p = tape.constant(swapped);
        let l = tape.dice_loss(p, &g).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-5);
        // each class half-overlaps: 2·1/(2+2) = 0.5 per class
        let half = soft_resize_mask::<f64>(&[0, 1, 0, 1], 2, 2, 1, 2).unwrap();
        let p = tape.constant(half);
        let l = tape.dice_loss(p, &g).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let labels = [0u8, 2, 1, 1];
        let hot = soft_resize_mask::<f64>(&labels, 2, 2, 1, 3).unwrap();
        let p = tape.constant(hot);
        let l = tape.cross_entropy(p, &labels).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
        let u = tape.constant(Tensor::full(&[3, 2, 2], 1.0 / 3.0));
        let l = tape.cross_entropy(u, &labels).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
        let probs = Tensor::new(
            &[2, 2, 2],
            alloc::vec![0.9, 0.2, 0.6, 0.5, 0.1, 0.8, 0.4, 0.5],
        )
        .unwrap();
        let p = tape.constant(probs);
        let l = tape.cross_entropy(p, &[0, 1, 0, 1]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln() + 0.5f64.ln()) / 4.0;
        assert!((tape.value(l).item() - want).abs() < 1e-15);
    }

    #[test]
    fn weights_combine() {
        let w = LossWeights::default();
        assert!((w.combine([1.0; 4]).unwrap() - 1.0).abs() < 1e-15);
        assert!((w.combine([0.2, 0.4, 0.4, 0.1]).unwrap() - 0.18).abs() < 1e-15);
        let bad = LossWeights { fin: 0.5, ..w };
        assert!(matches!(bad.combine([1.0; 4]), Err(Error::Config(_))));
    }

    #[test]
    fn combined_loss_is_the_weighted_sum() {
        let mask = random_mask(8, 8, 2, 4);
        let t = Targets::<f64>::from_masks(&[&mask], 8, 8, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = |tape: &mut Tape<f64>, h: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..h * h).map(|_| rng.random_range(0.05..0.95)).collect();
            let mut d = a.clone();
            d.extend(a.iter().map(|v| 1.0 - v));
            tape.leaf(Tensor::new(&[1, 2, h, h], d).unwrap(), true)
        };
        let heads = HeadOutputs {
            cnn: p(&mut tape, 8, 1),
            blt: p(&mut tape, 4, 2),
            cgt: p(&mut tape, 2, 3),
            fin: p(&mut tape, 8, 4),
        };
        let parts = combined_loss(&mut tape, &heads, &t, &LossWeights::default()).unwrap();
        let vals = parts.terms.map(|v| tape.value(v).item());
        let want = LossWeights::default().combine(vals).unwrap();
        assert!((tape.value(parts.total).item() - want).abs() < 1e-15);
        let grads = tape.backward(parts.total).unwrap();
        for v in [heads.cnn, heads.blt, heads.cgt, heads.fin] {
            assert!(grads.get(v).unwrap().data().iter().any(|g| *g != 0.0));
        }
    }

    #[test]
    fn fusion_zero_weights_give_uniform_output() {
        let mut store = ParamStore::<f64>::new();
        let fusion = {
            let mut init = Init::new(&mut store, 1);
            init.group(Group::Fusion);
            Fusion::new(&mut init, 1, 4, 3)
        };
        for p in store.params_mut() {
            if p.name.starts_with("fusion.head") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let mut f = store.bind(true, |_| true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = |s: &[usize]| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0));
        let dec = f.tape.constant(r(&[2, 1, 8, 8]));
        let cgt = f.tape.constant(r(&[2, 4, 2, 2]));
        let blt = f.tape.constant(r(&[2, 2, 4, 4]));
        let out = fusion.forward(&mut f, dec, cgt, blt).unwrap();
        assert_eq!(f.tape.shape(out), [2, 4, 8, 8]);
        assert!(f.tape.value(out).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn fusion_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let fusion = {
            let mut init = Init::new(&mut store, 3);
            Fusion::new(&mut init, 1, 3, 3)
        };
        let n = store.params().len();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = |s: &[usize]| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0));
        let mut all: Vec<Tensor<f64>> = store.params().iter().map(|p| p.value.clone()).collect();
        all.extend([r(&[2, 1, 8, 8]), r(&[2, 4, 2, 2]), r(&[2, 2, 4, 4])]);
        let mask = random_mask(8, 8, 3, 5);
        let mask2 = random_mask(8, 8, 3, 6);
        let t = Targets::<f64>::from_masks(&[&mask, &mask2], 8, 8, 3).unwrap();
        let report = gradcheck(
            |tape, vars| {
                let mut f = store.bind_vars(core::mem::take(tape), vars[..n].to_vec(), true);
                let p = fusion.forward(&mut f, vars[n], vars[n + 1], vars[n + 2])?;
                let loss = final_loss(&mut f.tape, p, &t.labels, &t.g1)?;
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
