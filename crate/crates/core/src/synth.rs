//! Deterministic synthetic segmentation data and augmentation.
//!
//! `Rings` draws nested concentric ellipses (background, outer ring, middle
//! ring, inner disk for four classes), loosely mimicking a short-axis cardiac
//! slice. `Blob` draws one binary lesion-like shape with a smoothly perturbed
//! outline. Each class has its own intensity; Gaussian noise is added on top.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Rings,
    Blob,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Rings => "rings",
            Family::Blob => "blob",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rings" => Ok(Family::Rings),
            "blob" => Ok(Family::Blob),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub size: usize,
    pub classes: usize,
    pub family: Family,
    pub noise: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 4,
            family: Family::Rings,
            noise: 0.12,
        }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::Config(format!("image size {} is not a positive multiple of 16", self.size)));
        }
        match (self.family, self.classes) {
            (Family::Blob, 2) | (Family::Rings, 2..=4) => {}
            (f, c) => return Err(Error::Config(format!("{} family does not support {c} classes", f.name()))),
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise level {} must be nonnegative", self.noise)));
        }
        Ok(())
    }
}

/// Square grayscale image in `[0, 1]` with its label mask, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn image_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.size, self.size], |i| T::from_f64(self.image[i] as f64))
    }

    pub fn labels(&self) -> Vec<u8> {
        let mut l = self.mask.clone();
        l.sort_unstable();
        l.dedup();
        l
    }
}

const RING_INTENSITY: [f64; 4] = [0.25, 0.6, 0.35, 0.6];
const BLOB_INTENSITY: [f64; 2] = [0.3, 0.7];

/// Low-order radial perturbation `1 + Σ a_k cos(kθ + φ_k)`.
struct Outline {
    terms: Vec<(f64, f64, f64)>,
}

impl Outline {
    fn random(rng: &mut ChaCha8Rng, orders: core::ops::RangeInclusive<u32>, max_amp: f64) -> Self {
        let terms = orders
            .map(|k| (k as f64, rng.random_range(0.0..max_amp), rng.random_range(0.0..2.0 * PI)))
            .collect();
        Self { terms }
    }

    fn radius(&self, theta: f64) -> f64 {
        1.0 + self.terms.iter().map(|&(k, a, p)| a * libm::cos(k * theta + p)).sum::<f64>()
    }
}

fn draw(spec: &SampleSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = spec.size;
    let s = n as f64;
    let cy = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let cx = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let theta0 = rng.random_range(0.0..PI);
    let (sin0, cos0) = (libm::sin(theta0), libm::cos(theta0));
    let (a, b, levels, outline, base): (f64, f64, Vec<f64>, Outline, &[f64]) = match spec.family {
        Family::Rings => {
            let a = rng.random_range(0.26..0.36) * s;
            let b = rng.random_range(0.22..0.32) * s;
            let mid = rng.random_range(0.62..0.74);
            let inner = rng.random_range(0.34..0.46);
            let levels = match spec.classes {
                2 => alloc::vec![1.0],
                3 => alloc::vec![1.0, inner + 0.1],
                _ => alloc::vec![1.0, mid, inner],
            };
            (a, b, levels, Outline::random(rng, 2..=3, 0.05), &RING_INTENSITY)
        }
        Family::Blob => {
            let r = rng.random_range(0.2..0.3) * s;
            let b = r * rng.random_range(0.8..1.0);
            (r, b, alloc::vec![1.0], Outline::random(rng, 2..=4, 0.12), &BLOB_INTENSITY)
        }
    };
    let ring_base: Vec<f64> = (0..spec.classes)
        .map(|l| {
            let table = if spec.family == Family::Rings && spec.classes < 4 {
                // keep neighbouring classes well separated with fewer levels
                [0.25, 0.5, 0.65, 0.65][l]
            } else {
                base[l]
            };
            table + rng.random_range(-0.04..0.04)
        })
        .collect();
    // per-image gain and offset, so absolute intensity alone is ambiguous
    let gain = rng.random_range(0.5..1.5);
    let offset = rng.random_range(-0.15..0.15);
    let ring_base: Vec<f64> = ring_base.iter().map(|v| 0.45 + gain * (v - 0.45) + offset).collect();
    let bias = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    // small background ellipses that mimic a foreground intensity
    let distractors: Vec<(f64, f64, f64, f64, f64)> = (0..rng.random_range(0..=3))
        .map(|_| {
            let level = rng.random_range(1..spec.classes);
            (
                rng.random_range(0.05..0.95) * s,
                rng.random_range(0.05..0.95) * s,
                rng.random_range(0.04..0.1) * s,
                rng.random_range(0.04..0.1) * s,
                ring_base[level],
            )
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).map_err(|e| Error::Invalid(format!("{e}")))?;

    let mut mask = alloc::vec![0u8; n * n];
    let mut image = alloc::vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
            let u = cos0 * dx + sin0 * dy;
            let v = -sin0 * dx + cos0 * dy;
            let r = libm::sqrt((u / a) * (u / a) + (v / b) * (v / b));
            let rr = r / outline.radius(libm::atan2(v, u));
            let label = levels.iter().filter(|&&lv| rr <= lv).count();
            mask[i * n + j] = label as u8;
            let shade = bias.0 * (dy / s) + bias.1 * (dx / s);
            let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let mut base = ring_base[label];
            if label == 0 {
                for &(ey, ex, ry, rx, v) in &distractors {
                    let (py, px) = ((y - ey) / ry, (x - ex) / rx);
                    if py * py + px * px <= 1.0 {
                        base = v;
                    }
                }
            }
            image[i * n + j] = (base + shade + eps).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample { size: n, image, mask })
}

fn large_enough(sample: &Sample, classes: usize) -> bool {
    let mut counts = alloc::vec![0usize; classes];
    for &l in &sample.mask {
        counts[l as usize] += 1;
    }
    let min = sample.mask.len().div_ceil(100);
    counts[1..].iter().all(|&c| c >= min)
}

/// Pure function of `(spec, seed)`. Redraws until every foreground class
/// covers at least 1% of the image.
pub fn generate_sample(spec: &SampleSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let s = draw(spec, &mut rng)?;
        if large_enough(&s, spec.classes) {
            return Ok(s);
        }
    }
    Err(Error::Invalid(format!("seed {seed} produced no valid sample")))
}

/// Samples for seeds `range`.
pub fn generate_range(spec: &SampleSpec, range: core::ops::Range<u64>) -> Result<Vec<Sample>> {
    range.map(|s| generate_sample(spec, s)).collect()
}

/// One draw of the augmentation transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Rotation in degrees.
    pub angle: f64,
    pub scale: f64,
    /// Translation in pixels (rows, cols), i.e. the crop offset.
    pub shift: (f64, f64),
    pub contrast: f64,
    pub gamma: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        angle: 0.0,
        scale: 1.0,
        shift: (0.0, 0.0),
        contrast: 1.0,
        gamma: 1.0,
    };

    pub fn random(rng: &mut impl Rng, size: usize) -> Self {
        let t = 0.08 * size as f64;
        Self {
            angle: rng.random_range(-25.0..=25.0),
            scale: rng.random_range(0.9..=1.1),
            shift: (rng.random_range(-t..=t), rng.random_range(-t..=t)),
            contrast: rng.random_range(0.8..=1.2),
            gamma: rng.random_range(0.7..=1.5),
        }
    }
}

/// Applies the transforms: geometry by inverse mapping about the image
/// center (bilinear for the image, nearest for the mask, edge clamped),
/// then contrast about the mean, clamping and gamma on the image.
pub fn augment_with(sample: &Sample, p: &AugmentParams) -> Sample {
    let n = sample.size;
    let c = n as f64 / 2.0 - 0.5;
    let th = p.angle.to_radians();
    let (sin, cos) = (libm::sin(th), libm::cos(th));
    let last = (n - 1) as f64;
    let at = |i: usize, j: usize| sample.image[i * n + j] as f64;
    let mut image = alloc::vec![0f32; n * n];
    let mut mask = alloc::vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            let (y, x) = (i as f64 - c - p.shift.0, j as f64 - c - p.shift.1);
            let sy = ((cos * y - sin * x) / p.scale + c).clamp(0.0, last);
            let sx = ((sin * y + cos * x) / p.scale + c).clamp(0.0, last);
            let (y0, x0) = (libm::floor(sy) as usize, libm::floor(sx) as usize);
            let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            let v = (at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx) * (1.0 - ty)
                + (at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx) * ty;
            image[i * n + j] = v as f32;
            let (ny, nx) = (libm::round(sy) as usize, libm::round(sx) as usize);
            mask[i * n + j] = sample.mask[ny.min(n - 1) * n + nx.min(n - 1)];
        }
    }
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / (n * n) as f64;
    for v in &mut image {
        let x = (*v as f64 * p.contrast + (1.0 - p.contrast) * mean).clamp(0.0, 1.0);
        *v = libm::pow(x, p.gamma) as f32;
    }
    Sample { size: n, image, mask }
}

pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let p = AugmentParams::random(rng, sample.size);
    augment_with(sample, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_sample() {
        let spec = SampleSpec::default();
        assert_eq!(generate_sample(&spec, 3).unwrap(), generate_sample(&spec, 3).unwrap());
        assert_ne!(generate_sample(&spec, 3).unwrap(), generate_sample(&spec, 4).unwrap());
    }

    #[test]
    fn blob_is_binary() {
        let spec = SampleSpec {
            classes: 2,
            family: Family::Blob,
            ..SampleSpec::default()
        };
        for seed in 0..20 {
            let s = generate_sample(&spec, seed).unwrap();
            assert!(s.mask.iter().all(|&l| l < 2));
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    fn adjacency(mask: &[u8], n: usize, c: usize) -> Vec<Vec<bool>> {
        let mut adj = alloc::vec![alloc::vec![false; c]; c];
        for i in 0..n {
            for j in 0..n {
                let a = mask[i * n + j] as usize;
                for (di, dj) in [(0, 1), (1, 0)] {
                    if i + di < n && j + dj < n {
                        let b = mask[(i + di) * n + j + dj] as usize;
                        adj[a][b] = true;
                        adj[b][a] = true;
                    }
                }
            }
        }
        adj
    }

    #[test]
    fn rings_touch_only_neighbours() {
        let spec = SampleSpec::default();
        for seed in 0..30 {
            let s = generate_sample(&spec, seed).unwrap();
            let adj = adjacency(&s.mask, 64, 4);
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        assert_eq!(adj[a][b], a.abs_diff(b) == 1, "seed {seed}: {a}-{b}");
                    }
                }
            }
            assert!(large_enough(&s, 4));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_sample(&SampleSpec { size: 40, ..SampleSpec::default() }, 0).is_err());
        let bad = SampleSpec {
            family: Family::Blob,
            ..SampleSpec::default()
        };
        assert!(generate_sample(&bad, 0).is_err());
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let s = generate_sample(&SampleSpec::default(), 1).unwrap();
        assert_eq!(augment_with(&s, &AugmentParams::IDENTITY), s);
    }

    #[test]
    fn gamma_on_constant_image() {
        let s = Sample {
            size: 16,
            image: alloc::vec![0.5; 256],
            mask: alloc::vec![0; 256],
        };
        let out = augment_with(
            &s,
            &AugmentParams {
                gamma: 2.0,
                ..AugmentParams::IDENTITY
            },
        );
        assert!(out.image.iter().all(|&v| v == 0.25));
    }

    proptest! {
        #[test]
        fn augmentation_keeps_shape_and_labels(seed in 0u64..64, aug in 0u64..1000) {
            let s = generate_sample(&SampleSpec::default(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(aug);
            let out = augment(&s, &mut rng);
            prop_assert_eq!(out.image.len(), s.image.len());
            let before = s.labels();
            prop_assert!(out.labels().iter().all(|l| before.contains(l)));
            prop_assert!(out.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}
