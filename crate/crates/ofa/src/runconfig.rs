//! Experiment configuration: one JSON document with per-subcommand
//! sections, flat dotted-key overrides, and full-echo reproducibility.
//!
//! Resolution order is defaults <- config file <- `key=value` overrides <-
//! explicit seed/threads flags. Overrides may only touch keys that already
//! exist in the resolved document, which catches typos before they silently
//! change nothing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LayerPreset, TargetMode};
use crate::synth::PhantomConfig;
use crate::vit::VitConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {err}")]
    Read { path: String, err: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override {0:?} is not of the form key=value")]
    BadOverride(String),
    #[error("override key {0:?} does not name a declared config field")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Path to the dataset manifest (JSON array of volume/mask/label).
    pub manifest: String,
    /// Train/val/test fractions; must sum to one.
    pub ratios: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: "data/manifest.json".into(), ratios: [0.7, 0.1, 0.2] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Weight of the attention-supervision term.
    pub alpha: f64,
    pub ofa_layers: LayerPreset,
    pub target_mode: TargetMode,
    /// Supervise each head separately instead of the head mean.
    pub per_head: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: bool,
    /// Voxels of one label a patch needs before it counts as organ.
    pub min_overlap_voxels: usize,
    /// Emit a losses.jsonl line every this many optimizer steps.
    pub log_every: usize,
    /// Resume from this checkpoint (epoch granularity).
    pub resume: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            alpha: 1000.0,
            ofa_layers: LayerPreset::First,
            target_mode: TargetMode::ExcludeCls,
            per_head: false,
            lr: 7e-4,
            batch_size: 4,
            epochs: 24,
            augment: false,
            min_overlap_voxels: 1,
            log_every: 1,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    pub presets: Vec<LayerPreset>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            alphas: vec![900.0, 1000.0, 1100.0],
            presets: vec![
                LayerPreset::First,
                LayerPreset::FirstLast,
                LayerPreset::FirstMiddleLast,
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: String,
    /// Select the threshold on the test split instead of validation (for
    /// reproducing report-style tables; off by default).
    pub threshold_on_test: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub checkpoint: String,
    pub volume: String,
    /// Optional mask for the organ-attention-mass summary.
    pub mask: Option<String>,
    /// Axial slice indices to export as PGM images.
    pub slices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub vit: VitConfig,
    pub data: DataSection,
    pub train: TrainSection,
    pub synth: PhantomConfig,
    pub sweep: SweepSection,
    pub eval: EvalSection,
    pub rollout: RolloutSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            vit: VitConfig::toy(),
            data: DataSection::default(),
            train: TrainSection::default(),
            synth: PhantomConfig::default(),
            sweep: SweepSection::default(),
            eval: EvalSection::default(),
            rollout: RolloutSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults merged with an optional config file and dotted-key
    /// overrides like `train.alpha=500`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(RunConfig::default()).expect("default serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
                path: path.display().to_string(),
                err: e.to_string(),
            })?;
            let file: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            merge_into(&mut doc, &file);
        }
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        serde_json::from_value(doc).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Invariants shared by every subcommand that trains or splits.
    pub fn validate(&self) -> Result<(), String> {
        let sum: f64 = self.data.ratios.iter().sum();
        if self.data.ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(format!("data.ratios must sum to 1, got {:?}", self.data.ratios));
        }
        if self.train.epochs == 0 {
            return Err("train.epochs must be >= 1".into());
        }
        if self.train.alpha < 0.0 {
            return Err("train.alpha must be >= 0".into());
        }
        if self.train.batch_size == 0 {
            return Err("train.batch_size must be >= 1".into());
        }
        if self.train.lr <= 0.0 {
            return Err("train.lr must be positive".into());
        }
        self.vit.validate().map_err(|e| e.to_string())?;
        self.train
            .ofa_layers
            .validate(self.vit.layers)
            .map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Recursively overlay `src` onto `dst` (objects merge, everything else
/// replaces).
fn merge_into(dst: &mut serde_json::Value, src: &serde_json::Value) {
    match (dst, src) {
        (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) => merge_into(slot, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (dst, src) => *dst = src.clone(),
    }
}

/// Apply one `dotted.key=value` override. The key must already exist.
fn apply_override(doc: &mut serde_json::Value, ov: &str) -> Result<(), ConfigError> {
    let (key, raw) = ov.split_once('=').ok_or_else(|| ConfigError::BadOverride(ov.into()))?;
    let mut cursor = &mut *doc;
    for part in key.split('.') {
        cursor = cursor
            .get_mut(part)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    // Interpret the value as JSON when possible, else as a bare string.
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    *cursor = value;
    Ok(())
}
