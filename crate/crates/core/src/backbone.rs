//! Lightweight U-shaped CNN backbone.
//!
//! Stem: two 3×3 CBR blocks to `C` channels. Encoder: four blocks of 2×2 max
//! pooling plus two CBR blocks at `(2C, 4C, 8C, 8C)`. Decoder: four blocks of
//! bilinear ×2 upsampling, concatenation with the same-scale encoder map
//! (skip first) and two CBR blocks at `(4C, 2C, C, C)`.

use alloc::format;

use crate::error::{shape_err, Error, Result};
use crate::nn::{ConvBnRelu, Forward, Head, Init};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::nchw;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Base channel count `C`.
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            in_channels: 1,
            num_classes: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        Ok(())
    }

    pub fn down_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [2 * c, 4 * c, 8 * c, 8 * c]
    }

    pub fn up_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [4 * c, 2 * c, c, c]
    }
}

/// Checks that the spatial size supports four 2× downsamplings.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(shape_err("backbone", format!("input {h}×{w} is not divisible by 16")));
    }
    Ok(())
}

/// Encoder maps `F1…F5` and the full-resolution decoder output.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
    pub f5: Var,
    pub decoder_out: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: [ConvBnRelu; 2],
    down: [[ConvBnRelu; 2]; 4],
    up: [[ConvBnRelu; 2]; 4],
}

impl Backbone {
    pub fn new<T: Real>(init: &mut Init<'_, T>, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let stem = [
            ConvBnRelu::new(init, "backbone.stem.0", config.in_channels, c),
            ConvBnRelu::new(init, "backbone.stem.1", c, c),
        ];
        let dc = config.down_channels();
        let mut prev = c;
        let down = core::array::from_fn(|i| {
            let out = dc[i];
            let block = [
                ConvBnRelu::new(init, &format!("backbone.down{}.0", i + 1), prev, out),
                ConvBnRelu::new(init, &format!("backbone.down{}.1", i + 1), out, out),
            ];
            prev = out;
            block
        });
        // skips for decoder blocks 1..4 are F4, F3, F2, F1
        let skip = [dc[2], dc[1], dc[0], c];
        let uc = config.up_channels();
        let up = core::array::from_fn(|i| {
            let c_in = skip[i] + prev;
            let out = uc[i];
            let block = [
                ConvBnRelu::new(init, &format!("backbone.up{}.0", i + 1), c_in, out),
                ConvBnRelu::new(init, &format!("backbone.up{}.1", i + 1), out, out),
            ];
            prev = out;
            block
        });
        Ok(Self { config, stem, down, up })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConvBnRelu> {
        self.stem.iter().chain(self.down.iter().flatten()).chain(self.up.iter().flatten())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().map(|b| b.num_params()).sum()
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = nchw("backbone", f.tape.shape(image))?;
        if c != self.config.in_channels {
            return Err(shape_err(
                "backbone",
                format!("image has {c} channels, expected {}", self.config.in_channels),
            ));
        }
        check_input_size(h, w)?;
        f.tape.push_scope("backbone");
        let out = self.forward_inner(f, image);
        f.tape.pop_scope();
        out
    }

    fn forward_inner<T: Real>(&self, f: &mut Forward<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let pair = |f: &mut Forward<'_, T>, blocks: &[ConvBnRelu; 2], x: Var| -> Result<Var> {
            let y = blocks[0].forward(f, x)?;
            blocks[1].forward(f, y)
        };
        let f1 = pair(f, &self.stem, image)?;
        let mut enc = [f1; 5];
        for (i, block) in self.down.iter().enumerate() {
            let p = f.tape.maxpool2x2(enc[i])?;
            enc[i + 1] = pair(f, block, p)?;
        }
        let mut x = enc[4];
        for (i, block) in self.up.iter().enumerate() {
            let skip = enc[3 - i];
            let up = f.tape.upsample(x, 2)?;
            let axis = f.tape.shape(up).len() - 3;
            let cat = f.tape.concat(&[skip, up], axis)?;
            x = pair(f, block, cat)?;
        }
        Ok(FeaturePyramid {
            f1: enc[0],
            f2: enc[1],
            f3: enc[2],
            f4: enc[3],
            f5: enc[4],
            decoder_out: x,
        })
    }
}

/// CNN prediction head on the decoder output.
pub fn cnn_head<T: Real>(init: &mut Init<'_, T>, config: &BackboneConfig) -> Head {
    Head::new(init, "head.cnn", config.base_channels, config.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Group, ParamStore};
    use crate::tensor::Tensor;

    fn build(c: usize, classes: usize, seed: u64) -> (ParamStore<f32>, Backbone) {
        let mut store = ParamStore::new();
        let bb = {
            let mut init = Init::new(&mut store, seed);
            init.group(Group::Backbone);
            Backbone::new(
                &mut init,
                BackboneConfig {
                    base_channels: c,
                    in_channels: 1,
                    num_classes: classes,
                },
            )
            .unwrap()
        };
        (store, bb)
    }

    /// Hand formula: Σ over convs of 9·C_in·C_out + C_out, plus 2·C_out for
    /// each batch norm.
    fn param_oracle(c: usize, cin: usize) -> usize {
        let convs = [
            (cin, c),
            (c, c),
            (c, 2 * c),
            (2 * c, 2 * c),
            (2 * c, 4 * c),
            (4 * c, 4 * c),
            (4 * c, 8 * c),
            (8 * c, 8 * c),
            (8 * c, 8 * c),
            (8 * c, 8 * c),
            (16 * c, 4 * c),
            (4 * c, 4 * c),
            (8 * c, 2 * c),
            (2 * c, 2 * c),
            (4 * c, c),
            (c, c),
            (2 * c, c),
            (c, c),
        ];
        convs.iter().map(|&(i, o)| 9 * i * o + o + 2 * o).sum()
    }

    #[test]
    fn parameter_count_matches_hand_formula() {
        let (store, bb) = build(16, 4, 0);
        assert_eq!(store.num_scalars(), param_oracle(16, 1));
        assert_eq!(bb.num_params(), param_oracle(16, 1));
        let (store, _) = build(1, 2, 0);
        assert_eq!(store.num_scalars(), param_oracle(1, 1));
    }

    #[test]
    fn minimal_channel_plan() {
        let (_, bb) = build(1, 2, 0);
        let outs: alloc::vec::Vec<usize> = bb.blocks().map(|b| b.conv.c_out).collect();
        assert_eq!(outs, [1, 1, 2, 2, 4, 4, 8, 8, 8, 8, 4, 4, 2, 2, 1, 1, 1, 1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, _) = build(4, 2, 7);
        let (b, _) = build(4, 2, 7);
        let (c, _) = build(4, 2, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn shapes(h: usize, c: usize) -> [alloc::vec::Vec<usize>; 6] {
        let (mut store, bb) = build(c, 4, 1);
        let mut f = store.bind(true, |_| true);
        let img = f.tape.constant(Tensor::from_fn(&[2, 1, h, h], |i| (i % 7) as f32 * 0.1));
        let p = bb.forward(&mut f, img).unwrap();
        [p.f1, p.f2, p.f3, p.f4, p.f5, p.decoder_out].map(|v| f.tape.shape(v).to_vec())
    }

    #[test]
    fn pyramid_shapes_follow_schedule() {
        let s = shapes(64, 16);
        assert_eq!(s[4], [2, 128, 4, 4]);
        assert_eq!(s[0], [2, 16, 64, 64]);
        assert_eq!(s[1], [2, 32, 32, 32]);
        assert_eq!(s[5], [2, 16, 64, 64]);
        let s = shapes(32, 16);
        assert_eq!(s[2], [2, 64, 8, 8]);
        assert_eq!(s[3], [2, 128, 4, 4]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (mut store, bb) = build(2, 2, 1);
        let mut f = store.bind(true, |_| true);
        let img = f.tape.constant(Tensor::zeros(&[1, 1, 24, 32]));
        assert!(matches!(bb.forward(&mut f, img), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_image_gives_spatially_constant_decoder_output() {
        // With zero input and zero biases every conv sees zero, batch norm
        // maps the constant to beta = 0 and all maps stay constant.
        let (mut store, bb) = build(2, 2, 3);
        let mut f = store.bind(true, |_| true);
        let img = f.tape.constant(Tensor::zeros(&[2, 1, 32, 32]));
        let p = bb.forward(&mut f, img).unwrap();
        let out = f.tape.value(p.decoder_out);
        let hw = 32 * 32;
        for plane in out.data().chunks(hw) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }
}
