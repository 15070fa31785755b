//! Attention rollout and heatmap export.
//!
//! Rollout aggregates per-layer attention into a single token-to-token
//! influence matrix: each layer's head-mean matrix is mixed with the
//! identity, `(A + I) / 2`, rows renormalized, and the per-layer matrices
//! are multiplied top layer to bottom. Row 0 of the product is the CLS
//! token's aggregate attention over the input; its patch entries paint the
//! heatmap volume.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::diff::matmul_into;
use crate::vit::{mean_head_attention, AttentionStack, VitError};
use crate::volgrid::{PatchGrid, VolError, Volume};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("attention stack is empty")]
    EmptyStack,
    #[error("rollout vector length {vector} does not match grid patch count {patches}")]
    GridMismatch { vector: usize, patches: usize },
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Aggregated rollout matrix plus the CLS-to-patch attention vector.
#[derive(Debug, Clone)]
pub struct RolloutMap {
    n_tokens: usize,
    matrix: Vec<f64>,
    cls_to_patch: Vec<f64>,
}

impl RolloutMap {
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// CLS row restricted to patch tokens (length N).
    pub fn cls_to_patch(&self) -> &[f64] {
        &self.cls_to_patch
    }
}

/// Roll the per-layer head-mean matrices into one influence matrix.
pub fn attention_rollout(attn: &AttentionStack) -> Result<RolloutMap, RolloutError> {
    if attn.n_layers() == 0 {
        return Err(RolloutError::EmptyStack);
    }
    let t = attn.n_tokens;
    let mut rollout: Option<Vec<f64>> = None;
    for layer in 0..attn.n_layers() {
        let mixed = residual_mix(&mean_head_attention(attn, layer)?, t);
        rollout = Some(match rollout {
            None => mixed,
            // Later layers multiply from the left.
            Some(prev) => {
                let mut out = vec![0.0; t * t];
                matmul_into(&mixed, &prev, t, t, t, &mut out);
                out
            }
        });
    }
    let matrix = rollout.expect("at least one layer");
    let cls_to_patch = matrix[1..t].to_vec();
    Ok(RolloutMap { n_tokens: t, matrix, cls_to_patch })
}

/// `(A + I) / 2` with rows renormalized to sum one.
fn residual_mix(a: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        let row = &a[i * t..(i + 1) * t];
        let orow = &mut out[i * t..(i + 1) * t];
        let mut sum = 0.0;
        for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
            *o = 0.5 * (v + if i == j { 1.0 } else { 0.0 });
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Paint each patch's CLS attention weight uniformly over its voxel block.
pub fn heatmap_volume(
    rollout: &RolloutMap,
    grid: &PatchGrid,
    dims: [usize; 3],
) -> Result<Volume, RolloutError> {
    let v = rollout.cls_to_patch();
    if v.len() != grid.patch_count() || grid.volume_dims() != dims {
        return Err(RolloutError::GridMismatch {
            vector: v.len(),
            patches: grid.patch_count(),
        });
    }
    let mut out = Volume::zeros(dims);
    for (p, &w) in v.iter().enumerate() {
        let [zr, yr, xr] = grid.patch_block(p);
        for z in zr.clone() {
            for y in yr.clone() {
                for x in xr.clone() {
                    out.set(z, y, x, w as f32);
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of CLS-to-patch rollout mass landing on the given organ
/// patches. Always in [0, 1]; 0 for an empty organ set.
pub fn organ_attention_mass(rollout: &RolloutMap, organ_patches: &[usize]) -> f64 {
    let v = rollout.cls_to_patch();
    let total: f64 = v.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let organ: f64 = organ_patches.iter().map(|&p| v[p]).sum();
    organ / total
}

/// Write one axial slice (fixed z) as a binary `P5` PGM, min-max normalized
/// over the whole volume.
pub fn write_pgm_slice(volume: &Volume, z: usize, path: &Path) -> Result<(), RolloutError> {
    let [d, h, w] = volume.dims();
    assert!(z < d, "slice {z} out of {d}");
    let (lo, hi) = volume
        .data()
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            let v = (volume.at(z, y, x) - lo) / range;
            out.write_all(&[(v * 255.0).round().clamp(0.0, 255.0) as u8])?;
        }
    }
    out.flush()?;
    Ok(())
}
