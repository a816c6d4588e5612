//! Training loop, inference and evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blt::ScoredWindow;
use crate::error::{Error, Result};
use crate::metrics::{foreground_metrics, mean_dice, ClassMetrics};
use crate::model::BatFormer;
use crate::nn::Group;
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::supervision::{LossWeights, Targets};
use crate::synth::{augment, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The last this-many epochs train everything except the backbone.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub weights: LossWeights,
    pub augment: bool,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            finetune_epochs: 4,
            finetune_lr: 1e-4,
            weights: LossWeights::default(),
            augment: true,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalization".into()));
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.finetune_epochs > self.epochs {
            return Err(Error::Config("finetune epochs exceed total epochs".into()));
        }
        self.weights.validate()
    }

    fn phase(&self, epoch: usize) -> (f64, bool) {
        if epoch + self.finetune_epochs >= self.epochs {
            (self.finetune_lr, true)
        } else {
            (self.lr, false)
        }
    }
}

/// Stacks same-sized samples into a `B×1×H×W` batch.
pub fn batch_images<T: Real>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let Some(first) = samples.first() else {
        return Err(Error::Invalid("empty batch".into()));
    };
    let n = first.size;
    if samples.iter().any(|s| s.size != n) {
        return Err(Error::Invalid("samples in a batch differ in size".into()));
    }
    let data = samples.iter().flat_map(|s| s.image.iter().map(|&v| T::from_f64(v as f64))).collect();
    Tensor::new(&[samples.len(), 1, n, n], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Unweighted CNN, BLT, CGT and final terms (NaN where absent).
    pub terms: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub backbone_frozen: bool,
    pub mean_loss: f64,
    /// Per-term means, NaN where a term is absent.
    pub mean_terms: [f64; 4],
    pub steps: usize,
}

/// Model plus optimizer state.
pub struct Trainer<T: Real> {
    pub model: BatFormer<T>,
    pub config: TrainConfig,
    opt: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: BatFormer<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            opt: Adam::new(config.adam),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&Sample], lr: f64, freeze_backbone: bool) -> Result<StepStats> {
        let classes = self.model.config().num_classes;
        let n = batch.first().map_or(0, |s| s.size);
        let masks: Vec<&[u8]> = batch.iter().map(|s| s.mask.as_slice()).collect();
        let targets = Targets::<T>::from_masks(&masks, n, n, classes)?;
        let images = batch_images::<T>(batch)?;
        let BatFormer { net, store } = &mut self.model;
        let mut f = store.bind(true, |g| !(freeze_backbone && g == Group::Backbone));
        let x = f.tape.constant(images);
        let preds = net.forward(&mut f, x, None)?;
        let (loss, terms) = net.loss(&mut f, &preds, &targets, &self.config.weights)?;
        let mut grads = f.tape.backward(loss)?;
        let g = f.param_grads(&mut grads);
        let stats = StepStats {
            loss: f.tape.value(loss).item().as_f64(),
            terms: terms.map(|t| t.map_or(f64::NAN, |v| f.tape.value(v).item().as_f64())),
        };
        drop(f);
        self.opt.step(store, &g, lr)?;
        Ok(stats)
    }

    /// One pass over `data` in a seeded random order. A trailing batch of a
    /// single sample is dropped.
    pub fn epoch(&mut self, data: &[Sample], epoch: usize) -> Result<EpochStats> {
        let (lr, frozen) = self.config.phase(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut terms = [0.0; 4];
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let owned: Vec<Sample> = if self.config.augment {
                chunk.iter().map(|&i| augment(&data[i], &mut self.rng)).collect()
            } else {
                chunk.iter().map(|&i| data[i].clone()).collect()
            };
            let refs: Vec<&Sample> = owned.iter().collect();
            let st = self.step(&refs, lr, frozen)?;
            total += st.loss;
            for (a, b) in terms.iter_mut().zip(st.terms) {
                *a += b;
            }
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Invalid("no batch with at least two samples".into()));
        }
        Ok(EpochStats {
            epoch,
            lr,
            backbone_frozen: frozen,
            mean_loss: total / steps as f64,
            mean_terms: terms.map(|t| t / steps as f64),
            steps,
        })
    }

    pub fn fit(&mut self, data: &[Sample], mut report: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        let mut out = Vec::with_capacity(self.config.epochs);
        for e in 0..self.config.epochs {
            let s = self.epoch(data, e)?;
            report(&s);
            out.push(s);
        }
        Ok(out)
    }
}

/// Inference output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    /// `c×H×W` output probabilities.
    pub probs: Tensor<f32>,
    pub windows: Vec<ScoredWindow>,
}

/// Runs the model in inference mode, `batch_size` images at a time.
pub fn predict<T: Real>(model: &mut BatFormer<T>, samples: &[&Sample], batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images = batch_images::<T>(chunk)?;
        let BatFormer { net, store } = model;
        let mut f = store.bind(false, |_| false);
        let x = f.tape.constant(images);
        let preds = net.forward(&mut f, x, None)?;
        let p = f.tape.value(preds.output());
        let (c, h, w) = (p.shape()[1], p.shape()[2], p.shape()[3]);
        let mut windows = preds.windows.into_iter();
        for b in 0..chunk.len() {
            let slab = &p.data()[b * c * h * w..(b + 1) * c * h * w];
            let labels = (0..h * w)
                .map(|px| {
                    let mut best = 0;
                    for l in 1..c {
                        if slab[l * h * w + px] > slab[best * h * w + px] {
                            best = l;
                        }
                    }
                    best as u8
                })
                .collect();
            out.push(Prediction {
                labels,
                probs: Tensor::new(&[c, h, w], slab.iter().map(|v| v.as_f64() as f32).collect())?,
                windows: windows.next().unwrap_or_default(),
            });
        }
    }
    Ok(out)
}

/// Per-sample, per-foreground-class metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(usize, ClassMetrics)>,
}

impl Evaluation {
    pub fn mean_dice(&self) -> f64 {
        let r: Vec<ClassMetrics> = self.rows.iter().map(|r| r.1).collect();
        mean_dice(&r)
    }

    pub fn class_mean(&self, class: u8, metric: impl Fn(&ClassMetrics) -> f64) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.1.class == class).map(|r| metric(&r.1)).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn evaluate<T: Real>(model: &mut BatFormer<T>, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    let classes = model.config().num_classes;
    let refs: Vec<&Sample> = samples.iter().collect();
    let preds = predict(model, &refs, batch_size)?;
    let mut rows = Vec::new();
    for (i, (s, p)) in samples.iter().zip(&preds).enumerate() {
        for m in foreground_metrics(&p.labels, &s.mask, s.size, classes)
            .map_err(|e| Error::Invalid(format!("sample {i}: {e}")))?
        {
            rows.push((i, m));
        }
    }
    Ok(Evaluation { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_range, SampleSpec};

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            cgt_heads: 2,
            blt_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn batches_stack_in_order() {
        let spec = SampleSpec { size: 16, ..SampleSpec::default() };
        let s = generate_range(&spec, 0..2).unwrap();
        let t = batch_images::<f32>(&[&s[0], &s[1]]).unwrap();
        assert_eq!(t.shape(), [2, 1, 16, 16]);
        assert_eq!(t.data()[256..], s[1].image[..]);
        assert!(batch_images::<f32>(&[]).is_err());
    }

    #[test]
    fn phases() {
        let c = TrainConfig {
            epochs: 5,
            finetune_epochs: 2,
            ..TrainConfig::default()
        };
        let p: Vec<bool> = (0..5).map(|e| c.phase(e).1).collect();
        assert_eq!(p, [false, false, false, true, true]);
        assert!(TrainConfig { batch_size: 1, ..c }.validate().is_err());
    }

    #[test]
    fn repeated_steps_reduce_loss_on_a_fixed_batch() {
        let spec = SampleSpec { size: 32, ..SampleSpec::default() };
        let data = generate_range(&spec, 0..2).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let model = BatFormer::<f32>::new(small(), 0).unwrap();
        let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
        let first = t.step(&refs, 3e-3, false).unwrap();
        assert!(first.terms.iter().all(|v| v.is_finite()));
        let mut last = first;
        for _ in 0..15 {
            last = t.step(&refs, 3e-3, false).unwrap();
        }
        assert!(last.loss < first.loss, "{} -> {}", first.loss, last.loss);
    }

    #[test]
    fn frozen_phase_keeps_backbone_fixed() {
        let spec = SampleSpec { size: 32, ..SampleSpec::default() };
        let data = generate_range(&spec, 0..2).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let model = BatFormer::<f32>::new(small(), 1).unwrap();
        let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
        let before: Vec<Tensor<f32>> = t.model.store.params().iter().map(|p| p.value.clone()).collect();
        t.step(&refs, 1e-3, true).unwrap();
        for (p, b) in t.model.store.params().iter().zip(&before) {
            assert_eq!(p.group == Group::Backbone, p.value == *b, "{}", p.name);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = SampleSpec { size: 32, ..SampleSpec::default() };
        let data = generate_range(&spec, 0..4).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            finetune_epochs: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(BatFormer::<f32>::new(small(), 2).unwrap(), cfg).unwrap();
            t.fit(&data, |_| {}).unwrap();
            t.model.store.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn predictions_and_metrics_have_expected_shape() {
        let spec = SampleSpec { size: 32, ..SampleSpec::default() };
        let data = generate_range(&spec, 0..3).unwrap();
        let mut model = BatFormer::<f32>::new(small(), 3).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let p = predict(&mut model, &refs, 2).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|p| p.labels.len() == 32 * 32 && p.labels.iter().all(|&l| l < 4)));
        assert!(p.iter().all(|p| !p.windows.is_empty()));
        let e = evaluate(&mut model, &data, 2).unwrap();
        assert_eq!(e.rows.len(), 3 * 3);
        assert!((0.0..=1.0).contains(&e.mean_dice()));
    }
}
