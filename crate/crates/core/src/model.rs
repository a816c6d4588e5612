//! Full network assembly.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{cnn_head, Backbone, BackboneConfig, FeaturePyramid};
use crate::blt::{Blt, BltConfig, ScoredWindow};
use crate::cgt::{Cgt, CgtConfig};
use crate::error::{Error, Result};
use crate::nn::{Forward, Group, Head, Init, ParamStore};
use crate::real::Real;
use crate::supervision::{combined_loss, final_loss, Fusion, HeadOutputs, LossWeights, Targets};
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Backbone, both transformers and the fusion head.
    Full,
    /// Backbone and its CNN head only, trained on the final loss alone.
    BackboneOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BackboneOnly => "backbone",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "backbone" => Ok(Variant::BackboneOnly),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub cgt_heads: usize,
    pub blt_heads: usize,
    pub blt_window: Option<(usize, usize)>,
    pub blt_stride: Option<usize>,
    pub alpha: f64,
    pub iou_threshold: f64,
    /// Kernel size of the fusion CBR block.
    pub fusion_kernel: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            in_channels: 1,
            num_classes: 4,
            cgt_heads: 4,
            blt_heads: 4,
            blt_window: None,
            blt_stride: None,
            alpha: 0.25,
            iou_threshold: 0.25,
            fusion_kernel: 1,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            base_channels: self.base_channels,
            in_channels: self.in_channels,
            num_classes: self.num_classes,
        }
    }

    pub fn cgt(&self) -> CgtConfig {
        CgtConfig::for_backbone(self.base_channels, self.cgt_heads, self.num_classes)
    }

    pub fn blt(&self) -> BltConfig {
        BltConfig {
            window: self.blt_window,
            stride: self.blt_stride,
            alpha: self.alpha,
            iou_threshold: self.iou_threshold,
            ..BltConfig::for_backbone(self.base_channels, self.blt_heads, self.num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.blt().validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("labels are stored as bytes; at most 255 classes".into()));
        }
        if self.cgt_heads == 0 {
            return Err(Error::Config("cgt needs at least one head".into()));
        }
        if self.fusion_kernel % 2 == 0 {
            return Err(Error::Config("fusion kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Layer layout; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub cnn_head: Head,
    pub cgt: Option<Cgt>,
    pub blt: Option<Blt>,
    pub fusion: Option<crate::supervision::Fusion>,
}

/// Probabilities produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub pyramid: FeaturePyramid,
    pub cnn: Var,
    pub cgt: Option<Var>,
    pub blt: Option<Var>,
    pub fin: Option<Var>,
    pub windows: Vec<Vec<ScoredWindow>>,
}

impl Predictions {
    /// The network's segmentation output at full resolution.
    pub fn output(&self) -> Var {
        self.fin.unwrap_or(self.cnn)
    }
}

impl Network {
    pub fn new<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(store, seed);
        init.group(Group::Backbone);
        let bb_cfg = config.backbone();
        let backbone = Backbone::new(&mut init, bb_cfg)?;
        init.group(Group::Heads);
        let cnn_head = cnn_head(&mut init, &bb_cfg);
        let (cgt, blt, fusion) = match config.variant {
            Variant::BackboneOnly => (None, None, None),
            Variant::Full => {
                let c = config.base_channels;
                init.group(Group::Cgt);
                let cgt = Cgt::new(&mut init, config.cgt(), 4 * c, 8 * c, 8 * c)?;
                init.group(Group::Blt);
                let blt = Blt::new(&mut init, config.blt(), 2 * c)?;
                init.group(Group::Fusion);
                let fusion = Fusion::new(&mut init, c, config.num_classes, config.fusion_kernel);
                (Some(cgt), Some(blt), Some(fusion))
            }
        };
        Ok(Self {
            config,
            backbone,
            cnn_head,
            cgt,
            blt,
            fusion,
        })
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params()
            + self.cnn_head.conv.num_params()
            + self.cgt.as_ref().map_or(0, |m| m.num_params())
            + self.blt.as_ref().map_or(0, |m| m.num_params())
            + self.fusion.as_ref().map_or(0, |m| m.num_params())
    }

    /// Forward pass on `B×in×H×W` images. `frozen` fixes the local
    /// transformer's windows per sample.
    pub fn forward<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        images: Var,
        frozen: Option<&[Vec<ScoredWindow>]>,
    ) -> Result<Predictions> {
        let pyramid = self.backbone.forward(f, images)?;
        f.tape.push_scope("heads");
        let cnn = self.cnn_head.forward(f, pyramid.decoder_out);
        f.tape.pop_scope();
        let cnn = cnn?;
        let (Some(cgt), Some(blt), Some(fusion)) = (&self.cgt, &self.blt, &self.fusion) else {
            return Ok(Predictions {
                pyramid,
                cnn,
                cgt: None,
                blt: None,
                fin: None,
                windows: Vec::new(),
            });
        };
        let g = cgt.forward(f, &pyramid)?;
        let l = blt.forward(f, &pyramid, g.probs, frozen)?;
        let fin = fusion.forward(f, pyramid.decoder_out, g.features, l.features)?;
        Ok(Predictions {
            pyramid,
            cnn,
            cgt: Some(g.probs),
            blt: Some(l.probs),
            fin: Some(fin),
            windows: l.windows,
        })
    }

    /// Training objective: the weighted multi-scale loss for the full
    /// network, the final loss on the CNN head for the backbone variant.
    /// Returns the total and the four unweighted terms (zero-filled where
    /// absent).
    pub fn loss<T: Real>(
        &self,
        f: &mut Forward<'_, T>,
        preds: &Predictions,
        targets: &Targets<T>,
        weights: &LossWeights,
    ) -> Result<(Var, [Option<Var>; 4])> {
        match (preds.cgt, preds.blt, preds.fin) {
            (Some(cgt), Some(blt), Some(fin)) => {
                let heads = HeadOutputs {
                    cnn: preds.cnn,
                    blt,
                    cgt,
                    fin,
                };
                let parts = combined_loss(&mut f.tape, &heads, targets, weights)?;
                Ok((parts.total, parts.terms.map(Some)))
            }
            _ => {
                let l = final_loss(&mut f.tape, preds.cnn, &targets.labels, &targets.g1)?;
                Ok((l, [None, None, None, Some(l)]))
            }
        }
    }
}

/// Network layout together with its parameters.
#[derive(Debug, Clone)]
pub struct BatFormer<T> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> BatFormer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(config, &mut store, seed)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> BatFormer<U> {
        BatFormer {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }
}
