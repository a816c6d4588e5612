//! Binary PGM (`P5`) rasters and the raw `BATF` float tensor format.
//!
//! `BATF` layout, little-endian: magic `BATF`, `u16` version, `u32` rank,
//! `rank × u32` dims, then the `f32` values in row-major order.

use std::path::Path;

use batformer_core::Tensor;

use crate::error::{format_err, read, write, Result};

/// Grayscale raster with samples in `0..=maxval`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Gray {
    pub fn from_u8(width: usize, height: usize, data: &[u8]) -> Self {
        Self {
            width,
            height,
            maxval: 255,
            data: data.iter().map(|&v| v as u16).collect(),
        }
    }

    /// Values scaled into `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        let m = self.maxval as f32;
        self.data.iter().map(|&v| v as f32 / m).collect()
    }

    /// Quantizes `[0, 1]` values to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        Self {
            width,
            height,
            maxval: 255,
            data: values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            out.extend(self.data.iter().flat_map(|v| v.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(format_err("PGM", "truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(format_err("PGM", format!("magic {:?} is not P5", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format_err("PGM", format!("bad number {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(format_err("PGM", format!("maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the data
        pos += 1;
        let wide = maxval > 255;
        let need = width * height * if wide { 2 } else { 1 };
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() != need {
            return Err(format_err("PGM", format!("expected {need} data bytes, found {}", body.len())));
        }
        let data: Vec<u16> = if wide {
            body.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            body.iter().map(|&v| v as u16).collect()
        };
        if data.iter().any(|&v| v as usize > maxval) {
            return Err(format_err("PGM", "sample exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read(path)?)
    }
}

pub const BATF_VERSION: u16 = 1;

pub fn encode_batf(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(b"BATF");
    out.extend_from_slice(&BATF_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_batf(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes, "BATF");
    if r.take(4)? != b"BATF" {
        return Err(format_err("BATF", "bad magic"));
    }
    let version = r.u16()?;
    if version != BATF_VERSION {
        return Err(format_err("BATF", format!("unsupported version {version}")));
    }
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn save_batf(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write(path, &encode_batf(t))
}

pub fn load_batf(path: &Path) -> Result<Tensor<f32>> {
    decode_batf(&read(path)?)
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Self { bytes, pos: 0, kind }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(self.kind, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Rank, dims and values.
    pub(crate) fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(format_err(self.kind, format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| format_err(self.kind, "element count overflows"))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.kind, "element count overflows"))?)?;
        let data = raw.chunks(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Tensor::new(&shape, data)?)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(self.kind, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_header_layout() {
        let g = Gray::from_u8(3, 2, &[0, 1, 2, 3, 4, 255]);
        let bytes = g.encode();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(Gray::decode(&bytes).unwrap(), g);
    }

    #[test]
    fn pgm_with_comment_and_wide_samples() {
        let mut bytes = b"P5 # made by hand\n2 1\n1000\n".to_vec();
        bytes.extend_from_slice(&[0x03, 0xE8, 0x00, 0x01]);
        let g = Gray::decode(&bytes).unwrap();
        assert_eq!(g.data, [1000, 1]);
        assert_eq!(g.to_unit(), [1.0, 0.001]);
        assert_eq!(Gray::decode(&g.encode()).unwrap(), g);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(Gray::decode(b"P2\n1 1\n255\n\x00").is_err());
        assert!(Gray::decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(Gray::decode(b"P5\n1 1\n10\n\x0b").is_err());
        assert!(Gray::decode(b"P5\n1").is_err());
    }

    #[test]
    fn batf_layout() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.5]).unwrap();
        let b = encode_batf(&t);
        assert_eq!(&b[..4], b"BATF");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[1, 0, 0, 0]);
        assert_eq!(&b[10..14], &[2, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert!(decode_batf(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_batf(&extra).is_err());
    }

    proptest! {
        #[test]
        fn batf_round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) % 0x7f00_0000)).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let back = decode_batf(&encode_batf(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn pgm_round_trip(w in 1usize..6, h in 1usize..6, maxval in 1u16..=65535, seed in any::<u64>()) {
            let data: Vec<u16> = (0..w * h).map(|i| ((seed >> (i % 48)) as u16) % (maxval.saturating_add(1).max(1))).map(|v| v.min(maxval)).collect();
            let g = Gray { width: w, height: h, maxval, data };
            prop_assert_eq!(Gray::decode(&g.encode()).unwrap(), g);
        }
    }
}
