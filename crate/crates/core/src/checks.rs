//! Finite-difference check suite over every tape primitive and the full
//! training objective.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blt::ScoredWindow;
use crate::error::Result;
use crate::gradcheck::{gradcheck, gradcheck_with, Coords, GradcheckReport};
use crate::model::{BatFormer, ModelConfig};
use crate::supervision::{LossWeights, Targets};
use crate::tape::{RoiBox, RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.random_range(lo..hi))
    }

    /// Random tensor with entries bounded away from zero.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let v: f64 = self.rng.random_range(0.1..1.0);
            if self.rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
    }

    /// Shuffled distinct values, so max pooling has no ties.
    fn distinct(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            v.swap(i, j);
        }
        Tensor::from_fn(shape, |i| v[i])
    }

    fn run(
        &mut self,
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let seed = self.rng.random::<u64>();
        let report = gradcheck(
            |tape, v| {
                let y = f(tape, v)?;
                project(tape, y, seed)
            },
            &inputs,
            1e-5,
        )?;
        self.out.push(CheckOutcome {
            name,
            report,
            tolerance: PRIMITIVE_TOLERANCE,
        });
        Ok(())
    }
}

/// Reduces `v` to a scalar through a fixed random weighting.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    if tape.value(v).is_scalar() {
        return Ok(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tape.shape(v), |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// Checks every primitive on small random inputs drawn from `seed`.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    let (a, b) = (s.tensor(&[3, 4], -1.0, 1.0), s.tensor(&[4, 5], -1.0, 1.0));
    s.run("matmul", vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]))?;
    let c = s.tensor(&[2, 4], -1.0, 1.0);
    s.run("matmul_nt", vec![a.clone(), c], |t, v| t.matmul_nt(v[0], v[1]))?;
    s.run("transpose", vec![a.clone()], |t, v| t.transpose(v[0]))?;
    s.run("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[2, 6]))?;
    let a2 = s.tensor(&[3, 4], -1.0, 1.0);
    s.run("add", vec![a.clone(), a2.clone()], |t, v| t.add(v[0], v[1]))?;
    s.run("mul", vec![a.clone(), a2], |t, v| t.mul(v[0], v[1]))?;
    s.run("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.3))?;
    let bias = s.tensor(&[4], -1.0, 1.0);
    s.run("add_row_bias", vec![a, bias], |t, v| t.add_row_bias(v[0], v[1]))?;
    let r = s.off_zero(&[4, 5]);
    s.run("relu", vec![r], |t, v| t.relu(v[0]))?;
    let (p, q) = (s.tensor(&[2, 3, 2], -1.0, 1.0), s.tensor(&[2, 1, 2], -1.0, 1.0));
    s.run("concat", vec![p.clone(), q], |t, v| t.concat(&[v[0], v[1], v[0]], 1))?;
    s.run("narrow", vec![p.clone()], |t, v| t.narrow(v[0], 1, 1, 2))?;
    let sm = s.tensor(&[2, 3, 4], -2.0, 2.0);
    s.run("softmax", vec![sm], |t, v| t.softmax(v[0], 1))?;
    let (x, w, cb) = (
        s.tensor(&[2, 2, 4, 5], -1.0, 1.0),
        s.tensor(&[3, 2, 3, 3], -1.0, 1.0),
        s.tensor(&[3], -1.0, 1.0),
    );
    s.run("conv2d", vec![x.clone(), w, cb], |t, v| t.conv2d(v[0], v[1], Some(v[2])))?;
    let mp = s.distinct(&[1, 2, 4, 4]);
    s.run("maxpool2x2", vec![mp], |t, v| t.maxpool2x2(v[0]))?;
    s.run("resize_bilinear", vec![x.clone()], |t, v| t.resize_bilinear(v[0], 7, 3))?;
    let (g, be) = (s.tensor(&[2], 0.5, 1.5), s.tensor(&[2], -0.5, 0.5));
    for (name, training) in [("batch_norm.train", true), ("batch_norm.eval", false)] {
        s.run(name, vec![x.clone(), g.clone(), be.clone()], move |t, v| {
            let mut rs = RunningStats::new(2);
            rs.var = vec![0.7, 1.8];
            t.batch_norm(v[0], v[1], v[2], &mut rs, training)
        })?;
    }
    let chw = s.tensor(&[2, 5, 5], -1.0, 1.0);
    s.run("roi_align", vec![chw.clone()], |t, v| {
        t.roi_align(v[0], RoiBox { top: 1.5, left: 0.5, rows: 3, cols: 2 })
    })?;
    let (u1, u2) = (s.tensor(&[6, 2], -1.0, 1.0), s.tensor(&[6, 2], -1.0, 1.0));
    s.run("scatter_mean", vec![u1, u2], |t, v| {
        let boxes = [
            RoiBox { top: 0.0, left: 0.0, rows: 3, cols: 2 },
            RoiBox { top: 1.0, left: 1.0, rows: 3, cols: 2 },
        ];
        t.scatter_mean(&[v[0], v[1]], &boxes, 2, 5, 5)
    })?;
    s.run("sum", vec![p.clone()], |t, v| t.sum(v[0]))?;
    s.run("mean", vec![p], |t, v| t.mean(v[0]))?;
    let logits = s.tensor(&[2, 3, 2, 2], -1.0, 1.0);
    let labels: Vec<u8> = (0..8).map(|_| s.rng.random_range(0..3)).collect();
    let mut onehot = Tensor::zeros(&[2, 3, 2, 2]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(&[i / 4, l as usize, (i % 4) / 2, i % 2], 1.0);
    }
    // the losses take probabilities, so they are checked through a softmax
    let soft = onehot.map(|v| 0.8 * v + 0.2 / 3.0);
    s.run("l1_mean", vec![logits.clone()], move |t, v| {
        let pr = t.softmax(v[0], 1)?;
        t.l1_mean(pr, &soft)
    })?;
    let l2 = labels.clone();
    s.run("cross_entropy", vec![logits.clone()], move |t, v| {
        let pr = t.softmax(v[0], 1)?;
        t.cross_entropy(pr, &l2)
    })?;
    s.run("dice_loss", vec![logits], move |t, v| {
        let pr = t.softmax(v[0], 1)?;
        t.dice_loss(pr, &onehot)
    })?;
    Ok(s.out)
}

/// Full weighted loss of a reduced model on a `2×1×16×16` batch in double
/// precision, with window selection fixed from a first pass. Checks 24
/// spread coordinates per parameter tensor and the input image.
pub fn model_loss_check(seed: u64, step: f64) -> Result<CheckOutcome> {
    let config = ModelConfig {
        base_channels: 2,
        num_classes: 3,
        cgt_heads: 2,
        blt_heads: 2,
        fusion_kernel: 3,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = BatFormer::<f64>::new(config, seed)?;
    let masks: Vec<Vec<u8>> = (0..2).map(|_| (0..256).map(|_| rng.random_range(0..3)).collect()).collect();
    let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    let targets = Targets::from_masks(&refs, 16, 16, 3)?;
    let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let frozen: Vec<Vec<ScoredWindow>> = {
        let BatFormer { net, store } = &mut m;
        let mut f = store.bind(true, |_| true);
        let xv = f.tape.constant(x.clone());
        net.forward(&mut f, xv, None)?.windows
    };
    let n = m.store.params().len();
    let mut inputs: Vec<Tensor<f64>> = m.store.params().iter().map(|p| p.value.clone()).collect();
    inputs.push(x);
    let BatFormer { net, store } = &mut m;
    let report = gradcheck_with(
        |tape, vars| {
            let mut f = store.bind_vars(core::mem::take(tape), vars[..n].to_vec(), true);
            let p = net.forward(&mut f, vars[n], Some(&frozen))?;
            let (loss, _) = net.loss(&mut f, &p, &targets, &LossWeights::default())?;
            *tape = f.into_tape();
            Ok(loss)
        },
        &inputs,
        step,
        Coords::Spread(24),
    )?;
    Ok(CheckOutcome {
        name: "model_loss",
        report,
        tolerance: MODEL_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let out = primitive_checks(0).unwrap();
        assert_eq!(out.len(), 24);
        for c in &out {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn full_loss_passes() {
        let c = model_loss_check(0, 1e-5).unwrap();
        assert!(c.passed(), "{c:?}");
        assert!(c.report.checked > 100);
    }
}
