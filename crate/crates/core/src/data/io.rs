//! On-disk sample and dataset formats.
//!
//! A sample is a directory holding little-endian raw payloads `rgb.f32`
//! (row-major H_f x W_f x 3), `hsi.f32` (H_c x W_c x S), `mask.u16`
//! (H_f x W_f), and a `meta.json` with dimensions, class names and a CRC32
//! per payload. A dataset root holds `dataset.json` plus one directory and
//! `manifest.json` per split.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{BcafError, Result};
use crate::util::{atomic_write, crc32, read_file};

use super::{SamplePair, SynthDataset, SynthSpec};

pub const SAMPLE_FORMAT: &str = "bcaf-sample";
pub const DATASET_FORMAT: &str = "bcaf-dataset";
pub const MANIFEST_FORMAT: &str = "bcaf-manifest";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PayloadCrcs {
    pub rgb: u32,
    pub hsi: u32,
    pub mask: u32,
}

/// Per-sample metadata, `meta.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub format: String,
    pub version: u32,
    #[serde(rename = "H_f")]
    pub h_f: usize,
    #[serde(rename = "W_f")]
    pub w_f: usize,
    #[serde(rename = "H_c")]
    pub h_c: usize,
    #[serde(rename = "W_c")]
    pub w_c: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub r: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub class_names: Vec<String>,
    pub crc32: PayloadCrcs,
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u16_bytes(data: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 2);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_f32(bytes: &[u8], what: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(BcafError::Data(format!("{what}: truncated f32 payload")));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn bytes_u16(bytes: &[u8], what: &str) -> Result<Vec<u16>> {
    if bytes.len() % 2 != 0 {
        return Err(BcafError::Data(format!("{what}: truncated u16 payload")));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

/// Write one sample directory (payloads first, `meta.json` last, all writes
/// atomic).
pub fn write_sample(dir: &Path, s: &SamplePair, n: usize, class_names: &[String]) -> Result<()> {
    let (hf, wf, _) = s.rgb.dim();
    let (hc, wc, bands) = s.hsi.dim();
    let rgb_bytes = f32_bytes(s.rgb.as_slice().expect("rgb layout"));
    let hsi_bytes = f32_bytes(s.hsi.as_slice().expect("hsi layout"));
    let mask_bytes = u16_bytes(s.mask.as_slice().expect("mask layout"));
    let meta = SampleMeta {
        format: SAMPLE_FORMAT.to_string(),
        version: FORMAT_VERSION,
        h_f: hf,
        w_f: wf,
        h_c: hc,
        w_c: wc,
        s: bands,
        r: s.r,
        n,
        class_names: class_names.to_vec(),
        crc32: PayloadCrcs {
            rgb: crc32(&rgb_bytes),
            hsi: crc32(&hsi_bytes),
            mask: crc32(&mask_bytes),
        },
    };
    atomic_write(&dir.join("rgb.f32"), &rgb_bytes)?;
    atomic_write(&dir.join("hsi.f32"), &hsi_bytes)?;
    atomic_write(&dir.join("mask.u16"), &mask_bytes)?;
    atomic_write(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

/// Read one sample directory back, verifying format, version, payload sizes
/// against the metadata dims, and checksums.
pub fn read_sample(dir: &Path) -> Result<(SamplePair, SampleMeta)> {
    let meta: SampleMeta = serde_json::from_slice(&read_file(&dir.join("meta.json"))?)?;
    if meta.format != SAMPLE_FORMAT {
        return Err(BcafError::Data(format!(
            "{}: magic mismatch: expected {SAMPLE_FORMAT}, got {}",
            dir.display(),
            meta.format
        )));
    }
    if meta.version != FORMAT_VERSION {
        return Err(BcafError::Data(format!(
            "{}: unsupported version {}",
            dir.display(),
            meta.version
        )));
    }
    let rgb_bytes = read_file(&dir.join("rgb.f32"))?;
    let hsi_bytes = read_file(&dir.join("hsi.f32"))?;
    let mask_bytes = read_file(&dir.join("mask.u16"))?;
    if crc32(&rgb_bytes) != meta.crc32.rgb {
        return Err(BcafError::Checksum(dir.join("rgb.f32").display().to_string()));
    }
    if crc32(&hsi_bytes) != meta.crc32.hsi {
        return Err(BcafError::Checksum(dir.join("hsi.f32").display().to_string()));
    }
    if crc32(&mask_bytes) != meta.crc32.mask {
        return Err(BcafError::Checksum(dir.join("mask.u16").display().to_string()));
    }
    let rgb = bytes_f32(&rgb_bytes, "rgb.f32")?;
    let hsi = bytes_f32(&hsi_bytes, "hsi.f32")?;
    let mask = bytes_u16(&mask_bytes, "mask.u16")?;
    if rgb.len() != meta.h_f * meta.w_f * 3 {
        return Err(BcafError::Data(format!(
            "rgb.f32 holds {} values, meta implies {}",
            rgb.len(),
            meta.h_f * meta.w_f * 3
        )));
    }
    if hsi.len() != meta.h_c * meta.w_c * meta.s {
        return Err(BcafError::Data(format!(
            "hsi.f32 holds {} values, meta implies {}",
            hsi.len(),
            meta.h_c * meta.w_c * meta.s
        )));
    }
    if mask.len() != meta.h_f * meta.w_f {
        return Err(BcafError::Data(format!(
            "mask.u16 holds {} values, meta implies {}",
            mask.len(),
            meta.h_f * meta.w_f
        )));
    }
    let sample = SamplePair {
        rgb: Array3::from_shape_vec((meta.h_f, meta.w_f, 3), rgb).unwrap(),
        hsi: Array3::from_shape_vec((meta.h_c, meta.w_c, meta.s), hsi).unwrap(),
        mask: Array2::from_shape_vec((meta.h_f, meta.w_f), mask).unwrap(),
        r: meta.r,
    };
    Ok((sample, meta))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format: String,
    pub version: u32,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub spec: SynthSpec,
    pub class_names: Vec<String>,
}

/// Write an entire dataset under `root`: per-split sample directories plus
/// manifests, then the top-level `dataset.json` (written last so a complete
/// dataset is marked by its presence).
pub fn write_dataset(root: &Path, ds: &SynthDataset) -> Result<()> {
    let names = ds.spec.class_names();
    for (split, samples) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let mut listed = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let name = format!("sample_{i:05}");
            write_sample(&root.join(split).join(&name), s, ds.spec.num_classes, &names)?;
            listed.push(name);
        }
        let manifest = SplitManifest {
            format: MANIFEST_FORMAT.to_string(),
            version: FORMAT_VERSION,
            samples: listed,
        };
        atomic_write(
            &root.join(split).join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
    }
    let meta = DatasetMeta {
        format: DATASET_FORMAT.to_string(),
        version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        class_names: names,
    };
    atomic_write(
        &root.join("dataset.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )?;
    Ok(())
}

fn read_split(root: &Path, split: &str) -> Result<Vec<SamplePair>> {
    let manifest: SplitManifest =
        serde_json::from_slice(&read_file(&root.join(split).join("manifest.json"))?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(BcafError::Data(format!(
            "{split}/manifest.json: magic mismatch"
        )));
    }
    manifest
        .samples
        .iter()
        .map(|name| read_sample(&root.join(split).join(name)).map(|(s, _)| s))
        .collect()
}

/// Load a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<SynthDataset> {
    let meta: DatasetMeta = serde_json::from_slice(&read_file(&root.join("dataset.json"))?)?;
    if meta.format != DATASET_FORMAT {
        return Err(BcafError::Data("dataset.json: magic mismatch".into()));
    }
    Ok(SynthDataset {
        spec: meta.spec,
        train: read_split(root, "train")?,
        val: read_split(root, "val")?,
        test: read_split(root, "test")?,
    })
}

/// Resolve the dataset root: explicit flag, else the BCAF_DATA_ROOT
/// environment variable.
pub fn resolve_data_root(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os("BCAF_DATA_ROOT") {
        Some(v) => Ok(PathBuf::from(v)),
        None => Err(BcafError::Config(
            "no data root: pass --data-root or set BCAF_DATA_ROOT".into(),
        )),
    }
}
