//! Synthetic datasets on disk.
//!
//! A dataset directory holds `manifest.csv` with columns
//! `seed,family,path_image,path_mask` (paths relative to the directory),
//! images as `BATF` tensors of shape `1×S×S` and masks as 8-bit PGM files
//! whose sample values are the class labels.

use std::path::Path;

use batformer_core::synth::{generate_sample, Family, Sample, SampleSpec};

use crate::error::{format_err, read, write, Error, Result};
use crate::raster::{decode_batf, encode_batf, Gray};

pub const MANIFEST: &str = "manifest.csv";
const HEADER: [&str; 4] = ["seed", "family", "path_image", "path_mask"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub seed: u64,
    pub family: Family,
    pub path_image: String,
    pub path_mask: String,
}

/// Generates the samples for seeds `first..first + n` and writes them with
/// their manifest into `dir`.
pub fn write_dataset(dir: &Path, spec: &SampleSpec, first: u64, n: usize) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(n);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for seed in first..first + n as u64 {
        let s = generate_sample(spec, seed)?;
        let row = ManifestRow {
            seed,
            family: spec.family,
            path_image: format!("image_{seed:06}.batf"),
            path_mask: format!("mask_{seed:06}.pgm"),
        };
        write(&dir.join(&row.path_image), &encode_batf(&s.image_tensor()))?;
        Gray::from_u8(s.size, s.size, &s.mask).save(&dir.join(&row.path_mask))?;
        w.write_record([seed.to_string().as_str(), spec.family.name(), &row.path_image, &row.path_mask])?;
        rows.push(row);
    }
    let bytes = w.into_inner().map_err(|e| format_err("manifest", e.to_string()))?;
    write(&dir.join(MANIFEST), &bytes)?;
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let bytes = read(&dir.join(MANIFEST))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    if r.headers()?.iter().collect::<Vec<_>>() != HEADER {
        return Err(format_err("manifest", format!("header must be {}", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let seed = rec[0].parse().map_err(|_| format_err("manifest", format!("bad seed {:?}", &rec[0])))?;
        rows.push(ManifestRow {
            seed,
            family: Family::parse(&rec[1])?,
            path_image: rec[2].to_string(),
            path_mask: rec[3].to_string(),
        });
    }
    Ok(rows)
}

pub fn load_sample(dir: &Path, row: &ManifestRow) -> Result<Sample> {
    let img = decode_batf(&read(&dir.join(&row.path_image))?)?;
    let mask = Gray::load(&dir.join(&row.path_mask))?;
    let size = match *img.shape() {
        [1, h, w] if h == w => h,
        ref s => return Err(Error::Mismatch(format!("{}: image shape {s:?} is not 1×S×S", row.path_image))),
    };
    if mask.width != size || mask.height != size || mask.maxval != 255 {
        return Err(Error::Mismatch(format!("{}: mask does not match a {size}×{size} image", row.path_mask)));
    }
    Ok(Sample {
        size,
        image: img.into_data(),
        mask: mask.data.iter().map(|&v| v as u8).collect(),
    })
}

/// Every sample listed in `dir/manifest.csv`, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let rows = read_manifest(dir)?;
    if rows.is_empty() {
        return Err(Error::Mismatch(format!("{}: dataset is empty", dir.display())));
    }
    rows.iter().map(|r| load_sample(dir, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_dataset_reads_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SampleSpec {
            size: 16,
            ..SampleSpec::default()
        };
        let rows = write_dataset(dir.path(), &spec, 7, 3).unwrap();
        assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), [7, 8, 9]);
        assert_eq!(read_manifest(dir.path()).unwrap(), rows);
        let back = read_dataset(dir.path()).unwrap();
        for (s, seed) in back.iter().zip(7..) {
            assert_eq!(*s, generate_sample(&spec, seed).unwrap());
        }
        let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.starts_with("seed,family,path_image,path_mask\n7,rings,image_000007.batf,mask_000007.pgm\n"));
    }

    #[test]
    fn missing_or_broken_datasets_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).is_err());
        std::fs::write(dir.path().join(MANIFEST), "a,b\n").unwrap();
        assert!(read_dataset(dir.path()).is_err());
        std::fs::write(dir.path().join(MANIFEST), "seed,family,path_image,path_mask\n").unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
