//! Deterministic synthetic phantom dataset generator.
//!
//! Each sample is a noisy volume containing one bright ellipsoidal "organ"
//! with an exact segmentation mask. Positive samples carry a darker
//! spherical "lesion" fully inside the organ. Both classes additionally get
//! distractor blobs of lesion-like contrast placed outside the organ, drawn
//! from the same distribution regardless of label, so the background is
//! uninformative by construction and only reading the organ interior can
//! separate the classes.
//!
//! All randomness derives from (seed, sample index, channel) streams, so
//! parallel and serial generation write identical bytes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Manifest, ManifestEntry};
use crate::metrics::{roc_auc, ScoredSet};
use crate::rng;
use crate::volgrid::{SegMask, VolError, Volume};
use crate::vvol::{save_mask, save_volume, VvolError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config infeasible: {0}")]
    ConfigInfeasible(String),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error(transparent)]
    Vvol(#[from] VvolError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Min/max ellipsoid semi-axis in voxels.
    pub organ_radius: [f64; 2],
    /// Min/max lesion (and distractor) radius in voxels.
    pub lesion_radius: [f64; 2],
    /// Organ center wander around the volume center, in voxels per axis.
    /// Small values mimic registered anatomy; large values place the organ
    /// anywhere it fits.
    pub organ_center_jitter: f64,
    pub background_intensity: f64,
    /// Added to background inside the organ.
    pub organ_delta: f64,
    /// Added inside the lesion sphere (negative = darker).
    pub lesion_delta: f64,
    /// Distractor count per sample is drawn uniformly from 1..=this.
    pub max_distractors: usize,
    /// Added inside each distractor sphere.
    pub distractor_delta: f64,
    pub noise_std: f64,
    /// Fraction of positive (lesion-bearing) samples.
    pub balance: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [24, 24, 24],
            organ_radius: [3.5, 5.0],
            lesion_radius: [2.0, 2.5],
            organ_center_jitter: 2.0,
            background_intensity: 0.35,
            organ_delta: 0.1,
            lesion_delta: -0.3,
            max_distractors: 4,
            distractor_delta: -0.3,
            noise_std: 0.05,
            balance: 0.5,
            count: 280,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(SynthError::ConfigInfeasible("zero volume dimension".into()));
        }
        if self.organ_radius[0] <= 0.0 || self.organ_radius[0] > self.organ_radius[1] {
            return Err(SynthError::ConfigInfeasible("bad organ radius range".into()));
        }
        if self.lesion_radius[0] <= 0.0 || self.lesion_radius[0] > self.lesion_radius[1] {
            return Err(SynthError::ConfigInfeasible("bad lesion radius range".into()));
        }
        let min_dim = *self.dims.iter().min().expect("non-empty") as f64;
        if 2.0 * self.organ_radius[1] + 2.0 > min_dim {
            return Err(SynthError::ConfigInfeasible(format!(
                "organ radius up to {} cannot fit in dims {:?}",
                self.organ_radius[1], self.dims
            )));
        }
        if !(0.0 < self.balance && self.balance < 1.0) {
            return Err(SynthError::ConfigInfeasible("balance must be in (0, 1)".into()));
        }
        if self.count == 0 {
            return Err(SynthError::ConfigInfeasible("count must be positive".into()));
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        (self.count as f64 * self.balance).round() as usize
    }

    /// Defaults rescaled so the organ and lesion fit arbitrary dims.
    pub fn for_dims(dims: [usize; 3], seed: u64) -> Self {
        let m = *dims.iter().min().expect("non-empty dims") as f64;
        Self {
            dims,
            organ_radius: [(m * 0.2).max(1.0), (m * 0.33).max(1.5)],
            lesion_radius: [(m * 0.08).max(1.0), (m * 0.12).max(1.25)],
            organ_center_jitter: m,
            seed,
            ..Default::default()
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized distance: <= 1 means inside.
    fn dist(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s.sqrt()
    }

    fn min_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(f64::MAX, f64::min)
    }
}

/// One generated sample, before any file I/O.
pub struct PhantomSample {
    pub volume: Volume,
    pub mask: SegMask,
    pub label: u8,
}

/// Deterministic 0/1 label sequence with exactly `n_positive` ones.
pub fn label_sequence(cfg: &PhantomConfig) -> Vec<u8> {
    use rand::seq::SliceRandom;
    let n_pos = cfg.n_positive();
    let mut labels = vec![0u8; cfg.count];
    for l in labels.iter_mut().take(n_pos) {
        *l = 1;
    }
    let mut rng = rng::stream(cfg.seed, "phantom-labels", &[]);
    labels.shuffle(&mut rng);
    labels
}

/// Generate sample `index` with the given label. Randomness is drawn from
/// per-channel streams so the label never shifts the distractor draw.
pub fn generate_sample(cfg: &PhantomConfig, index: u64, label: u8) -> PhantomSample {
    let dims = cfg.dims;
    let dimf = [dims[0] as f64, dims[1] as f64, dims[2] as f64];

    let mut organ_rng = rng::stream(cfg.seed, "phantom-organ", &[index]);
    let organ = {
        let mut radii = [0.0; 3];
        for r in radii.iter_mut() {
            *r = organ_rng.gen_range(cfg.organ_radius[0]..=cfg.organ_radius[1]);
        }
        let mut center = [0.0; 3];
        for a in 0..3 {
            let mid = (dimf[a] - 1.0) / 2.0;
            let lo = radii[a].max(mid - cfg.organ_center_jitter);
            let hi = (dimf[a] - 1.0 - radii[a]).min(mid + cfg.organ_center_jitter);
            center[a] = if lo < hi { organ_rng.gen_range(lo..=hi) } else { mid.clamp(radii[a], dimf[a] - 1.0 - radii[a]) };
        }
        Ellipsoid { center, radii }
    };

    // Distractors are sampled before and independently of the lesion.
    let mut distractor_rng = rng::stream(cfg.seed, "phantom-distractor", &[index]);
    let n_distractors = if cfg.max_distractors == 0 {
        0
    } else {
        distractor_rng.gen_range(1..=cfg.max_distractors)
    };
    let mut distractors: Vec<([f64; 3], f64)> = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        let r = distractor_rng.gen_range(cfg.lesion_radius[0]..=cfg.lesion_radius[1]);
        // Keep the whole sphere clear of the organ (conservative bound).
        let clearance = 1.0 + r / organ.min_radius();
        for _attempt in 0..500 {
            let p = [
                distractor_rng.gen_range(0.0..dimf[0]),
                distractor_rng.gen_range(0.0..dimf[1]),
                distractor_rng.gen_range(0.0..dimf[2]),
            ];
            if organ.dist(p) > clearance {
                distractors.push((p, r));
                break;
            }
        }
    }

    let lesion: Option<([f64; 3], f64)> = if label == 1 {
        let mut lesion_rng = rng::stream(cfg.seed, "phantom-lesion", &[index]);
        let r = lesion_rng.gen_range(cfg.lesion_radius[0]..=cfg.lesion_radius[1]);
        // Sphere of radius r fits inside the ellipsoid when the center's
        // normalized distance stays below 1 - r / min_axis.
        let max_dist = (1.0 - r / organ.min_radius()).max(0.0);
        let mut center = organ.center;
        for _attempt in 0..200 {
            let p = [
                organ.center[0] + lesion_rng.gen_range(-organ.radii[0]..=organ.radii[0]),
                organ.center[1] + lesion_rng.gen_range(-organ.radii[1]..=organ.radii[1]),
                organ.center[2] + lesion_rng.gen_range(-organ.radii[2]..=organ.radii[2]),
            ];
            if organ.dist(p) <= max_dist {
                center = p;
                break;
            }
        }
        Some((center, r))
    } else {
        None
    };

    let mut noise_rng = rng::stream(cfg.seed, "phantom-noise", &[index]);
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let inside_organ = organ.dist(p) <= 1.0;
                let mut v = cfg.background_intensity;
                if inside_organ {
                    v += cfg.organ_delta;
                }
                if let Some((c, r)) = &lesion {
                    if sphere_dist(p, *c) <= *r {
                        v += cfg.lesion_delta;
                    }
                }
                for (c, r) in &distractors {
                    if sphere_dist(p, *c) <= *r {
                        v += cfg.distractor_delta;
                    }
                }
                v += gaussian(&mut noise_rng) * cfg.noise_std;
                data.push(v.clamp(0.0, 1.0) as f32);
                labels.push(if inside_organ { 1u8 } else { 0 });
            }
        }
    }
    let volume = Volume::new(dims, [1.0; 3], data).expect("generated volume is valid");
    let mask = SegMask::new(dims, labels, 1).expect("generated mask is valid");
    PhantomSample { volume, mask, label }
}

fn sphere_dist(p: [f64; 3], c: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = p[a] - c[a];
        s += d * d;
    }
    s.sqrt()
}

fn gaussian(rng: &mut rand_chacha::ChaCha20Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate the whole dataset into `out_dir` and write `manifest.json`
/// (paths relative to the manifest).
pub fn generate(cfg: &PhantomConfig, out_dir: &Path) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let labels = label_sequence(cfg);
    let mut entries = Vec::with_capacity(cfg.count);
    for (i, &label) in labels.iter().enumerate() {
        let sample = generate_sample(cfg, i as u64, label);
        let vol_name = format!("sample_{i:04}.vvol");
        let mask_name = format!("sample_{i:04}_mask.vvol");
        save_volume(&sample.volume, &out_dir.join(&vol_name))?;
        save_mask(&sample.mask, &out_dir.join(&mask_name))?;
        entries.push(ManifestEntry { volume: vol_name, mask: Some(mask_name), label });
    }
    let manifest = Manifest { base_dir: out_dir.to_path_buf(), entries };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Learnability report from the analytic oracles.
#[derive(Debug, Clone, Serialize)]
pub struct BayesCheck {
    /// AUC of "background mean minus organ-interior mean" (sign-corrected
    /// for the lesion contrast); the task ceiling proxy.
    pub oracle_auc: f64,
    /// AUC of the organ-exterior mean alone; must hover near chance.
    pub background_auc: f64,
    pub samples: usize,
}

/// Draw `samples` fresh phantoms (disjoint from any dataset index) and
/// score the analytic oracle classifiers.
pub fn bayes_check(cfg: &PhantomConfig, samples: usize) -> Result<BayesCheck, SynthError> {
    cfg.validate()?;
    use rand::seq::SliceRandom;
    let n_pos = (samples as f64 * cfg.balance).round() as usize;
    let mut labels = vec![0u8; samples];
    for l in labels.iter_mut().take(n_pos) {
        *l = 1;
    }
    let mut label_rng = rng::stream(cfg.seed, "bayes-labels", &[]);
    labels.shuffle(&mut label_rng);

    let sign = if cfg.lesion_delta < 0.0 {
        1.0
    } else if cfg.lesion_delta > 0.0 {
        -1.0
    } else {
        0.0
    };
    let mut oracle_scores = Vec::with_capacity(samples);
    let mut background_scores = Vec::with_capacity(samples);
    for (i, &label) in labels.iter().enumerate() {
        // High index offset keeps these draws disjoint from dataset samples.
        let sample = generate_sample(cfg, (1 << 32) + i as u64, label);
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (&v, &m) in sample.volume.data().iter().zip(sample.mask.labels()) {
            if m != 0 {
                inside += v as f64;
                n_in += 1;
            } else {
                outside += v as f64;
                n_out += 1;
            }
        }
        let inside = inside / n_in.max(1) as f64;
        let outside = outside / n_out.max(1) as f64;
        oracle_scores.push(sign * (outside - inside));
        background_scores.push(outside);
    }
    let oracle_auc = roc_auc(&ScoredSet::new(oracle_scores, labels.clone()).expect("valid set"))
        .expect("both classes present");
    let background_auc =
        roc_auc(&ScoredSet::new(background_scores, labels).expect("valid set"))
            .expect("both classes present");
    Ok(BayesCheck { oracle_auc, background_auc, samples })
}
