//! Phantom datasets on disk.
//!
//! A dataset directory holds `img_<id>.nodt` (truth, `2×H×W`),
//! `mask_<id>.nodt` (`W` zeros and ones), `ksp_<id>.nodt` (measured k-space,
//! `2×H×W`) and `manifest.txt` with one tab-separated
//! `id  acceleration  seed  noise_std` line per sample.

use std::fs;
use std::path::{Path, PathBuf};

use odetensor::io::{load_tensor, save_tensor};

use crate::error::{ReconError, Result};
use crate::mri::{default_center_fraction, forward_e, make_mask, ComplexImage, KSpace, Mask};
use crate::phantom::make_phantom;
use crate::seed;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    pub size: usize,
    pub acceleration: u32,
    pub noise: f32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub acceleration: u32,
    pub seed: u64,
    pub noise: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub truth: ComplexImage,
    pub mask: Mask,
    pub kspace: KSpace,
}

/// Build sample `index` of a dataset with root seed `root`.
pub fn make_sample(cfg: &GenConfig, index: usize) -> Result<(ManifestEntry, Sample)> {
    let s = seed::derive(cfg.seed, seed::SAMPLE, index as u64);
    let truth = make_phantom(cfg.size, s)?;
    let mask = make_mask(cfg.size, cfg.acceleration, default_center_fraction(cfg.acceleration), s)?;
    let mut kspace = forward_e(&truth, &mask)?;
    kspace.add_noise(&mask, cfg.noise, s)?;
    let id = format!("{index:04}");
    let entry = ManifestEntry { id: id.clone(), acceleration: cfg.acceleration, seed: s, noise: cfg.noise };
    Ok((entry, Sample { id, truth, mask, kspace }))
}

fn tensor_path(dir: &Path, kind: &str, id: &str) -> PathBuf {
    dir.join(format!("{kind}_{id}.nodt"))
}

/// Write one tensor file, reporting I/O failures with the path.
pub fn write_tensor_file(path: &Path, t: &odetensor::Tensor<f32>) -> Result<()> {
    save_tensor(path, t).map_err(|e| match e {
        odetensor::TensorError::Io(io) => ReconError::io(path, io),
        other => other.into(),
    })
}

pub fn read_tensor_file(path: &Path) -> Result<odetensor::Tensor<f32>> {
    load_tensor(path).map_err(|e| match e {
        odetensor::TensorError::Io(io) => ReconError::io(path, io),
        other => other.into(),
    })
}

/// Write a dataset to `dir`, creating it if needed.
pub fn generate(dir: &Path, cfg: &GenConfig) -> Result<Vec<ManifestEntry>> {
    if cfg.count == 0 {
        return Err(ReconError::Config("dataset count must be at least 1".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(ReconError::Config(format!("noise std must be non-negative, got {}", cfg.noise)));
    }
    fs::create_dir_all(dir).map_err(|e| ReconError::io(dir, e))?;
    let mut manifest = String::new();
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let (entry, sample) = make_sample(cfg, i)?;
        write_tensor_file(&tensor_path(dir, "img", &entry.id), &sample.truth.to_tensor())?;
        write_tensor_file(&tensor_path(dir, "mask", &entry.id), &sample.mask.to_tensor())?;
        write_tensor_file(&tensor_path(dir, "ksp", &entry.id), &sample.kspace.to_tensor())?;
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", entry.id, entry.acceleration, entry.seed, entry.noise));
        entries.push(entry);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| ReconError::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| ReconError::io(&path, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| ReconError::Config(format!("{}:{}: {what}", path.display(), n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(&format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            acceleration: fields[1].parse().map_err(|_| bad("invalid acceleration"))?,
            seed: fields[2].parse().map_err(|_| bad("invalid seed"))?,
            noise: fields[3].parse().map_err(|_| bad("invalid noise std"))?,
        });
    }
    if entries.is_empty() {
        return Err(ReconError::Config(format!("{} lists no samples", path.display())));
    }
    Ok(entries)
}

/// Load every sample listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let truth = ComplexImage::from_tensor(&read_tensor_file(&tensor_path(dir, "img", &e.id))?)?;
            let cf = default_center_fraction(e.acceleration);
            let mask = Mask::from_tensor(&read_tensor_file(&tensor_path(dir, "mask", &e.id))?, e.acceleration, cf, e.seed)?;
            let mut kspace = KSpace::from_tensor(&read_tensor_file(&tensor_path(dir, "ksp", &e.id))?)?;
            kspace.noise_std = e.noise;
            if (kspace.height(), kspace.width()) != (truth.height(), truth.width()) || mask.width() != truth.width() {
                return Err(ReconError::Dimension(format!("sample {} has inconsistent extents", e.id)));
            }
            Ok(Sample { id: e.id, truth, mask, kspace })
        })
        .collect()
}

/// Split in manifest order: the last `round(n·val_fraction)` samples
/// (at least one) validate, the rest train.
pub fn split(samples: Vec<Sample>, val_fraction: f64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(ReconError::Config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n = samples.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
    if n_val >= n {
        return Err(ReconError::Config(format!("{n} samples are too few for a train/validation split")));
    }
    let mut train = samples;
    let val = train.split_off(n - n_val);
    Ok((train, val))
}
