//! `BATC` model checkpoints.
//!
//! Layout, little-endian: magic `BATC`, `u16` version, `u32` length and
//! UTF-8 bytes of the model configuration (in config-file syntax), `u32`
//! tensor count, then per tensor a `u32` name length, the name, `u32` rank,
//! `rank × u32` dims and the `f32` values. A CRC32 of everything before it
//! closes the file. Batch-norm statistics are stored as
//! `<layer>.running_mean` and `<layer>.running_var`.

use std::path::Path;

use batformer_core::{BatFormer, Tensor};

use crate::config::{model_to_text, parse_model};
use crate::error::{format_err, read, write, Error, Result};
use crate::raster::Reader;

pub const VERSION: u16 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &BatFormer<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"BATC");
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model_to_text(model.config());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.store.params();
    let buffers = model.store.buffers();
    out.extend_from_slice(&((params.len() + 2 * buffers.len()) as u32).to_le_bytes());
    for p in params {
        put_tensor(&mut out, &p.name, p.value.shape(), p.value.data());
    }
    for b in buffers {
        let c = b.stats.mean.len();
        put_tensor(&mut out, &format!("{}.running_mean", b.name), &[c], &b.stats.mean);
        put_tensor(&mut out, &format!("{}.running_var", b.name), &[c], &b.stats.var);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<BatFormer<f32>> {
    if bytes.len() < 4 {
        return Err(format_err("BATC", "file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(format_err("BATC", format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader::new(body, "BATC");
    if r.take(4)? != b"BATC" {
        return Err(format_err("BATC", "bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format_err("BATC", format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let cfg = std::str::from_utf8(r.take(n)?).map_err(|_| format_err("BATC", "config is not UTF-8"))?;
    let config = parse_model(cfg)?;
    let mut model = BatFormer::<f32>::new(config, 0)?;
    let count = r.u32()? as usize;
    let expected = model.store.params().len() + 2 * model.store.buffers().len();
    if count != expected {
        return Err(Error::Mismatch(format!("checkpoint has {count} tensors, model expects {expected}")));
    }
    let mut seen = vec![false; expected];
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err("BATC", "tensor name is not UTF-8"))?
            .to_string();
        let t = r.tensor()?;
        let slot = place(&mut model, &name, t)?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(format_err("BATC", format!("tensor {name} appears twice")));
        }
    }
    r.finish()?;
    Ok(model)
}

/// Stores `t` under `name`; returns its slot in save order.
fn place(model: &mut BatFormer<f32>, name: &str, t: Tensor<f32>) -> Result<usize> {
    let np = model.store.params().len();
    if let Some(id) = model.store.find(name) {
        let p = model.store.get_mut(id);
        if p.shape() != t.shape() {
            return Err(Error::Mismatch(format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), p.shape())));
        }
        *p = t;
        return Ok(id.index());
    }
    let (layer, is_mean) = match (name.strip_suffix(".running_mean"), name.strip_suffix(".running_var")) {
        (Some(l), _) => (l, true),
        (_, Some(l)) => (l, false),
        _ => return Err(Error::Mismatch(format!("unknown tensor {name}"))),
    };
    let bufs = model.store.buffers_mut();
    let Some(i) = bufs.iter().position(|b| b.name == layer) else {
        return Err(Error::Mismatch(format!("unknown tensor {name}")));
    };
    let dst = if is_mean { &mut bufs[i].stats.mean } else { &mut bufs[i].stats.var };
    if t.shape() != [dst.len()] {
        return Err(Error::Mismatch(format!("{name}: stored shape {:?}, model expects [{}]", t.shape(), dst.len())));
    }
    dst.copy_from_slice(t.data());
    Ok(np + 2 * i + usize::from(!is_mean))
}

pub fn save(path: &Path, model: &BatFormer<f32>) -> Result<()> {
    write(path, &encode(model))
}

pub fn load(path: &Path) -> Result<BatFormer<f32>> {
    decode(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use batformer_core::model::{ModelConfig, Variant};

    fn small(variant: Variant) -> BatFormer<f32> {
        let cfg = ModelConfig {
            base_channels: 2,
            num_classes: 3,
            cgt_heads: 1,
            blt_heads: 1,
            variant,
            ..ModelConfig::default()
        };
        let mut m = BatFormer::new(cfg, 5).unwrap();
        for (i, b) in m.store.buffers_mut().iter_mut().enumerate() {
            b.stats.mean.iter_mut().for_each(|v| *v = i as f32 * 0.5);
            b.stats.var.iter_mut().for_each(|v| *v = 1.0 + i as f32);
        }
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for v in [Variant::Full, Variant::BackboneOnly] {
            let m = small(v);
            let bytes = encode(&m);
            let back = decode(&bytes).unwrap();
            assert_eq!(back.store, m.store);
            assert_eq!(back.config(), m.config());
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let b = encode(&small(Variant::Full));
        assert_eq!(&b[..4], b"BATC");
        assert_eq!(&b[4..6], &VERSION.to_le_bytes());
        let n = u32::from_le_bytes([b[6], b[7], b[8], b[9]]) as usize;
        assert!(std::str::from_utf8(&b[10..10 + n]).unwrap().starts_with("base_channels = 2\n"));
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = encode(&small(Variant::Full));
        let mid = b.len() / 2;
        b[mid] ^= 1;
        let e = decode(&b).unwrap_err();
        assert!(e.to_string().contains("CRC"), "{e}");
        assert!(decode(&b[..3]).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = small(Variant::Full);
        let mut bytes = encode(&m);
        // rewrite the config echo to a different class count, then fix the CRC
        let n = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let text = std::str::from_utf8(&bytes[10..10 + n]).unwrap().replace("num_classes = 3", "num_classes = 4");
        bytes.splice(10..10 + n, text.bytes());
        bytes.truncate(bytes.len() - 4);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Mismatch(_))));
    }
}
