//! Line-based `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. Missing keys keep their defaults.

use std::path::{Path, PathBuf};

use batformer_core::model::{ModelConfig, Variant};
use batformer_core::train::TrainConfig;

use crate::error::{read, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training data directory (with `manifest.csv`).
    pub data: Option<PathBuf>,
    /// Held-out data evaluated after training and at every checkpoint.
    pub test_data: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            test_data: None,
            checkpoint_every: 0,
            eval_batch: 8,
        }
    }
}

fn err(line: usize, detail: impl Into<String>) -> Error {
    Error::Config {
        line,
        detail: detail.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn window(line: usize, v: &str) -> Result<Option<(usize, usize)>> {
    if v == "auto" {
        return Ok(None);
    }
    let (h, w) = v.split_once('x').ok_or_else(|| err(line, format!("blt_window: expected HxW or auto, got {v:?}")))?;
    Ok(Some((num(line, "blt_window", h.trim())?, num(line, "blt_window", w.trim())?)))
}

/// Splits `text` into `(line number, key, value)` entries.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let (k, v) = s.split_once('=').ok_or_else(|| err(line, format!("expected key = value, got {s:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err(line, "empty key"));
        }
        if let Some((prev, ..)) = out.iter().find(|e| e.1 == k) {
            return Err(err(line, format!("{k} already set on line {prev}")));
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Applies a model key; `false` when the key is not a model key.
fn model_key(m: &mut ModelConfig, line: usize, k: &str, v: &str) -> Result<bool> {
    match k {
        "base_channels" => m.base_channels = num(line, k, v)?,
        "in_channels" => m.in_channels = num(line, k, v)?,
        "num_classes" => m.num_classes = num(line, k, v)?,
        "cgt_heads" => m.cgt_heads = num(line, k, v)?,
        "blt_heads" => m.blt_heads = num(line, k, v)?,
        "blt_window" => m.blt_window = window(line, v)?,
        "blt_stride" => m.blt_stride = if v == "auto" { None } else { Some(num(line, k, v)?) },
        "alpha" => m.alpha = num(line, k, v)?,
        "iou_threshold" => m.iou_threshold = num(line, k, v)?,
        "fusion_kernel" => m.fusion_kernel = num(line, k, v)?,
        "variant" => m.variant = Variant::parse(v).map_err(|e| err(line, e.to_string()))?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn parse_model(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for (line, k, v) in entries(text)? {
        if !model_key(&mut m, line, &k, &v)? {
            return Err(err(line, format!("unknown model key {k:?}")));
        }
    }
    m.validate()?;
    Ok(m)
}

impl RunConfig {
    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        let t = &mut c.train;
        for (line, k, v) in entries(text)? {
            let (k, v) = (k.as_str(), v.as_str());
            if model_key(&mut c.model, line, k, v)? {
                continue;
            }
            match k {
                "epochs" => t.epochs = num(line, k, v)?,
                "batch_size" => t.batch_size = num(line, k, v)?,
                "lr" => t.lr = num(line, k, v)?,
                "finetune_epochs" => t.finetune_epochs = num(line, k, v)?,
                "finetune_lr" => t.finetune_lr = num(line, k, v)?,
                "weight_cnn" => t.weights.cnn = num(line, k, v)?,
                "weight_blt" => t.weights.blt = num(line, k, v)?,
                "weight_cgt" => t.weights.cgt = num(line, k, v)?,
                "weight_final" => t.weights.fin = num(line, k, v)?,
                "augment" => t.augment = boolean(line, k, v)?,
                "seed" => t.seed = num(line, k, v)?,
                "beta1" => t.adam.beta1 = num(line, k, v)?,
                "beta2" => t.adam.beta2 = num(line, k, v)?,
                "eps" => t.adam.eps = num(line, k, v)?,
                "data" => c.data = Some(base.join(v)),
                "test_data" => c.test_data = Some(base.join(v)),
                "checkpoint_every" => c.checkpoint_every = num(line, k, v)?,
                "eval_batch" => c.eval_batch = num(line, k, v)?,
                _ => return Err(err(line, format!("unknown key {k:?}"))),
            }
        }
        c.model.validate()?;
        c.train.validate()?;
        if c.train.epochs == 0 {
            return Err(err(0, "epochs must be positive"));
        }
        if c.eval_batch == 0 {
            return Err(err(0, "eval_batch must be positive"));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| err(0, "config is not UTF-8"))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Model keys in canonical form, parseable by [`parse_model`].
pub fn model_to_text(m: &ModelConfig) -> String {
    let window = m.blt_window.map_or("auto".to_string(), |(h, w)| format!("{h}x{w}"));
    let stride = m.blt_stride.map_or("auto".to_string(), |s| s.to_string());
    format!(
        "base_channels = {}\nin_channels = {}\nnum_classes = {}\ncgt_heads = {}\nblt_heads = {}\n\
         blt_window = {window}\nblt_stride = {stride}\nalpha = {:?}\niou_threshold = {:?}\n\
         fusion_kernel = {}\nvariant = {}\n",
        m.base_channels,
        m.in_channels,
        m.num_classes,
        m.cgt_heads,
        m.blt_heads,
        m.alpha,
        m.iou_threshold,
        m.fusion_kernel,
        m.variant.name()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_when_empty() {
        let c = RunConfig::parse("# nothing\n\n", Path::new(".")).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn values_are_applied() {
        let text = "epochs = 3\nfinetune_epochs = 1\nlr=0.01\nvariant = backbone\nblt_window = 4x6\naugment = false\ndata = d\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.variant, Variant::BackboneOnly);
        assert_eq!(c.model.blt_window, Some((4, 6)));
        assert!(!c.train.augment);
        assert_eq!(c.data.as_deref(), Some(Path::new("/base/d")));
    }

    #[test]
    fn unknown_repeated_and_malformed_keys_fail() {
        let e = RunConfig::parse("epochs = 3\nepoch = 4\n", Path::new(".")).unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
        assert!(RunConfig::parse("lr = 1\nlr = 2\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("lr 1\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("lr = fast\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("batch_size = 1\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("weight_cnn = 0.5\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("lr = -1\n", Path::new(".")).is_err());
    }

    #[test]
    fn model_text_round_trips() {
        let m = ModelConfig {
            blt_window: Some((2, 4)),
            blt_stride: Some(1),
            alpha: 0.3,
            variant: Variant::BackboneOnly,
            ..ModelConfig::default()
        };
        assert_eq!(parse_model(&model_to_text(&m)).unwrap(), m);
        assert_eq!(parse_model(&model_to_text(&ModelConfig::default())).unwrap(), ModelConfig::default());
        assert!(parse_model("epochs = 3").is_err());
    }
}
