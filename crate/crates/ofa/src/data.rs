//! Dataset manifests, stratified splitting, and training-time augmentation.
//!
//! A manifest is a JSON array of `{volume, mask, label}` entries with paths
//! relative to the manifest file; `mask` may be null. Masks are a training
//! input only — nothing on the inference path reads them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::volgrid::{SegMask, VolError, Volume};
use crate::vvol::{load_mask, load_volume, VvolError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest error: {0}")]
    ManifestError(String),
    #[error("ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("class {label} has too few samples for the requested split (needs one per split)")]
    ClassTooSmall { label: u8 },
    #[error("sample {index} has no mask but training with alpha > 0 requires one")]
    MissingMask { index: usize },
    #[error(transparent)]
    Vvol(#[from] VvolError),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume: String,
    pub mask: Option<String>,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A sample pulled into memory.
pub struct LoadedSample {
    pub volume: Volume,
    pub mask: Option<SegMask>,
    pub label: u8,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DataError::ManifestError(format!("{}: {e}", path.display())))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| DataError::ManifestError(format!("{}: {e}", path.display())))?;
        if entries.iter().any(|e| e.label > 1) {
            return Err(DataError::ManifestError("labels must be 0 or 1".into()));
        }
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(Self { base_dir, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn load_sample(&self, index: usize) -> Result<LoadedSample, DataError> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| DataError::ManifestError(format!("index {index} out of range")))?;
        let volume = load_volume(&self.base_dir.join(&entry.volume))?;
        let mask = match &entry.mask {
            Some(m) => Some(load_mask(&self.base_dir.join(m))?),
            None => None,
        };
        Ok(LoadedSample { volume, mask, label: entry.label })
    }

    /// Copy of the manifest with every mask field nulled, for exercising
    /// the segmentation-free inference path.
    pub fn without_masks(&self) -> Manifest {
        Manifest {
            base_dir: self.base_dir.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry { volume: e.volume.clone(), mask: None, label: e.label })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class proportional allocation (largest remainder), shuffled
/// per-class with a seed-derived stream. Every class must land at least one
/// sample in every split.
pub fn stratified_split(labels: &[u8], ratios: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    use rand::seq::SliceRandom;
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios));
    }
    let mut splits = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let counts = allocate(idx.len(), ratios);
        if counts.iter().any(|&c| c == 0) {
            return Err(DataError::ClassTooSmall { label: class });
        }
        let mut rng = rng::stream(seed, "stratified-split", &[class as u64]);
        idx.shuffle(&mut rng);
        splits.train.extend(&idx[..counts[0]]);
        splits.val.extend(&idx[counts[0]..counts[0] + counts[1]]);
        splits.test.extend(&idx[counts[0] + counts[1]..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

/// Largest-remainder apportionment of n over three ratios; ties go to the
/// earlier split.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let raw = [n as f64 * ratios[0], n as f64 * ratios[1], n as f64 * ratios[2]];
    let mut counts = [raw[0].floor() as usize, raw[1].floor() as usize, raw[2].floor() as usize];
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).expect("finite ratios").then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// One sample's training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub flips: [bool; 3],
    pub intensity_scale: f64,
}

impl Augment {
    pub fn identity() -> Self {
        Self { flips: [false; 3], intensity_scale: 1.0 }
    }
}

/// Flip each axis with probability one half; intensity jitter within 10%.
pub fn draw_augment(seed: u64, epoch: u64, sample_index: u64) -> Augment {
    use rand::Rng;
    let mut rng = rng::stream(seed, "augment", &[epoch, sample_index]);
    Augment {
        flips: [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)],
        intensity_scale: rng.gen_range(0.9..=1.1),
    }
}

pub fn augment_volume(volume: &Volume, aug: &Augment) -> Volume {
    let [d, h, w] = volume.dims();
    let mut data = vec![0.0f32; d * h * w];
    for z in 0..d {
        let sz = if aug.flips[0] { d - 1 - z } else { z };
        for y in 0..h {
            let sy = if aug.flips[1] { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if aug.flips[2] { w - 1 - x } else { x };
                data[(z * h + y) * w + x] =
                    (volume.at(sz, sy, sx) as f64 * aug.intensity_scale) as f32;
            }
        }
    }
    Volume::new(volume.dims(), volume.spacing(), data).expect("augmented volume is valid")
}

pub fn augment_mask(mask: &SegMask, flips: [bool; 3]) -> SegMask {
    let [d, h, w] = mask.dims();
    let mut labels = vec![0u8; d * h * w];
    for z in 0..d {
        let sz = if flips[0] { d - 1 - z } else { z };
        for y in 0..h {
            let sy = if flips[1] { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if flips[2] { w - 1 - x } else { x };
                labels[(z * h + y) * w + x] = mask.at(sz, sy, sx);
            }
        }
    }
    SegMask::new(mask.dims(), labels, mask.max_label()).expect("flipped mask is valid")
}
