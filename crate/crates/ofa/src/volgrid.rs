//! Dense 3D volumes, segmentation masks, and uniform patch partitions.
//!
//! A [`Volume`] is a scalar field stored row-major in z -> y -> x order
//! (`index = (z * H + y) * W + x`). A [`SegMask`] is a co-registered label
//! field over the same dims, with 0 meaning background. A [`PatchGrid`]
//! partitions a volume into N uniform axis-aligned blocks; each block later
//! becomes one transformer token, so patch ordering here is the token
//! ordering everywhere else.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolError {
    #[error("dimension is zero")]
    ZeroDim,
    #[error("volume dim {dim} (axis {axis}) is not divisible by patch size {patch}")]
    NonDivisible { axis: usize, dim: usize, patch: usize },
    #[error("data length {got} does not match dims product {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("non-finite voxel value")]
    NonFinite,
    #[error("mask label {label} exceeds declared max label {max}")]
    LabelOutOfRange { label: u8, max: u8 },
    #[error("mask has no nonzero voxel")]
    EmptyMask,
}

/// Dense 3D scalar field, one `f32` per voxel, z-major/y/x order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self, VolError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolError::ZeroDim);
        }
        let want = dims[0] * dims[1] * dims[2];
        if data.len() != want {
            return Err(VolError::LengthMismatch { got: data.len(), want });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolError::NonFinite);
        }
        Ok(Self { dims, spacing, data })
    }

    /// All-zero volume with unit spacing.
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::new(dims, [1.0; 3], vec![0.0; dims[0] * dims[1] * dims[2]]).expect("zero volume")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }
}

/// Integer label field; 0 = background, k > 0 = organ label k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    dims: [usize; 3],
    max_label: u8,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, max_label: u8) -> Result<Self, VolError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolError::ZeroDim);
        }
        let want = dims[0] * dims[1] * dims[2];
        if labels.len() != want {
            return Err(VolError::LengthMismatch { got: labels.len(), want });
        }
        if let Some(&l) = labels.iter().find(|&&l| l > max_label) {
            return Err(VolError::LabelOutOfRange { label: l, max: max_label });
        }
        Ok(Self { dims, max_label, labels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![0; dims[0] * dims[1] * dims[2]], u8::MAX).expect("zero mask")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn max_label(&self) -> u8 {
        self.max_label
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, label: u8) {
        let i = (z * self.dims[1] + y) * self.dims[2] + x;
        self.labels[i] = label;
    }

    pub fn any_nonzero(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }
}

/// Partition of a volume into uniform 3D patches.
///
/// Patch index runs z-major, then y, then x:
/// `patch = (zb * gh + yb) * gw + xb` for block coords `(zb, yb, xb)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    volume_dims: [usize; 3],
    patch_size: [usize; 3],
    grid_dims: [usize; 3],
}

impl PatchGrid {
    pub fn volume_dims(&self) -> [usize; 3] {
        self.volume_dims
    }

    pub fn patch_size(&self) -> [usize; 3] {
        self.patch_size
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    /// Number of patches N.
    pub fn patch_count(&self) -> usize {
        self.grid_dims[0] * self.grid_dims[1] * self.grid_dims[2]
    }

    /// Voxels per patch.
    pub fn patch_voxels(&self) -> usize {
        self.patch_size[0] * self.patch_size[1] * self.patch_size[2]
    }

    /// Block coords -> patch index.
    pub fn patch_index(&self, zb: usize, yb: usize, xb: usize) -> usize {
        debug_assert!(zb < self.grid_dims[0] && yb < self.grid_dims[1] && xb < self.grid_dims[2]);
        (zb * self.grid_dims[1] + yb) * self.grid_dims[2] + xb
    }

    /// Patch index -> block coords.
    pub fn patch_coords(&self, patch: usize) -> (usize, usize, usize) {
        debug_assert!(patch < self.patch_count());
        let xb = patch % self.grid_dims[2];
        let yb = (patch / self.grid_dims[2]) % self.grid_dims[1];
        let zb = patch / (self.grid_dims[1] * self.grid_dims[2]);
        (zb, yb, xb)
    }

    /// Half-open voxel ranges `[z0..z1, y0..y1, x0..x1]` covered by a patch.
    pub fn patch_block(&self, patch: usize) -> [std::ops::Range<usize>; 3] {
        let (zb, yb, xb) = self.patch_coords(patch);
        [
            zb * self.patch_size[0]..(zb + 1) * self.patch_size[0],
            yb * self.patch_size[1]..(yb + 1) * self.patch_size[1],
            xb * self.patch_size[2]..(xb + 1) * self.patch_size[2],
        ]
    }
}

/// Partition `volume_dims` into uniform patches of `patch_size`.
///
/// Every dimension must be strictly positive and exactly divisible by the
/// corresponding patch dimension; non-divisible volumes are an error, not
/// padded.
pub fn partition(volume_dims: [usize; 3], patch_size: [usize; 3]) -> Result<PatchGrid, VolError> {
    if volume_dims.iter().any(|&d| d == 0) || patch_size.iter().any(|&p| p == 0) {
        return Err(VolError::ZeroDim);
    }
    for axis in 0..3 {
        if volume_dims[axis] % patch_size[axis] != 0 {
            return Err(VolError::NonDivisible {
                axis,
                dim: volume_dims[axis],
                patch: patch_size[axis],
            });
        }
    }
    let grid_dims = [
        volume_dims[0] / patch_size[0],
        volume_dims[1] / patch_size[1],
        volume_dims[2] / patch_size[2],
    ];
    Ok(PatchGrid { volume_dims, patch_size, grid_dims })
}

/// Per-patch sets of nonzero labels present among the patch's voxels.
///
/// An empty set marks a background patch.
pub fn organ_patches(mask: &SegMask, grid: &PatchGrid) -> Result<Vec<BTreeSet<u8>>, VolError> {
    if mask.dims() != grid.volume_dims() {
        return Err(VolError::DimMismatch(mask.dims(), grid.volume_dims()));
    }
    let mut sets = vec![BTreeSet::new(); grid.patch_count()];
    let [_, h, w] = mask.dims();
    let [pd, ph, pw] = grid.patch_size();
    let [_, gh, gw] = grid.grid_dims();
    for (i, &label) in mask.labels().iter().enumerate() {
        if label == 0 {
            continue;
        }
        let x = i % w;
        let y = (i / w) % h;
        let z = i / (w * h);
        let patch = ((z / pd) * gh + y / ph) * gw + x / pw;
        sets[patch].insert(label);
    }
    Ok(sets)
}

/// Crop a volume to the mask's bounding box, dilated by `margin_voxels` and
/// clamped to bounds, then resample the box to `out_dims` with trilinear
/// interpolation.
pub fn crop_to_organ(
    volume: &Volume,
    mask: &SegMask,
    margin_voxels: usize,
    out_dims: [usize; 3],
) -> Result<Volume, VolError> {
    if mask.dims() != volume.dims() {
        return Err(VolError::DimMismatch(mask.dims(), volume.dims()));
    }
    if out_dims.iter().any(|&d| d == 0) {
        return Err(VolError::ZeroDim);
    }
    let bbox = mask_bounding_box(mask).ok_or(VolError::EmptyMask)?;
    let dims = volume.dims();
    // Dilate and clamp; ranges are half-open.
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        lo[a] = bbox.0[a].saturating_sub(margin_voxels);
        hi[a] = (bbox.1[a] + margin_voxels).min(dims[a]);
    }
    let box_len = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];

    let mut out = vec![0.0f32; out_dims[0] * out_dims[1] * out_dims[2]];
    let mut idx = 0;
    for z in 0..out_dims[0] {
        let sz = sample_coord(z, out_dims[0], lo[0], box_len[0], dims[0]);
        for y in 0..out_dims[1] {
            let sy = sample_coord(y, out_dims[1], lo[1], box_len[1], dims[1]);
            for x in 0..out_dims[2] {
                let sx = sample_coord(x, out_dims[2], lo[2], box_len[2], dims[2]);
                out[idx] = trilinear(volume, sz, sy, sx);
                idx += 1;
            }
        }
    }
    let spacing_in = volume.spacing();
    let spacing = [
        spacing_in[0] * box_len[0] as f32 / out_dims[0] as f32,
        spacing_in[1] * box_len[1] as f32 / out_dims[1] as f32,
        spacing_in[2] * box_len[2] as f32 / out_dims[2] as f32,
    ];
    Volume::new(out_dims, spacing, out)
}

/// Inclusive-lo/exclusive-hi bounding box of nonzero mask voxels, or None.
pub fn mask_bounding_box(mask: &SegMask) -> Option<([usize; 3], [usize; 3])> {
    let [_, h, w] = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &label) in mask.labels().iter().enumerate() {
        if label == 0 {
            continue;
        }
        any = true;
        let c = [i / (w * h), (i / w) % h, i % w];
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a] + 1);
        }
    }
    any.then_some((lo, hi))
}

/// Center of output voxel `i` of `n` mapped into source voxel coordinates,
/// clamped to the volume. With `box_len == n` this is exactly `lo + i`.
fn sample_coord(i: usize, n: usize, lo: usize, box_len: usize, dim: usize) -> f64 {
    let scale = box_len as f64 / n as f64;
    let s = lo as f64 + (i as f64 + 0.5) * scale - 0.5;
    s.clamp(0.0, (dim - 1) as f64)
}

fn trilinear(v: &Volume, z: f64, y: f64, x: f64) -> f32 {
    let [d, h, w] = v.dims();
    let z0 = z.floor() as usize;
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let z1 = (z0 + 1).min(d - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fz = z - z0 as f64;
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let c = |zz: usize, yy: usize, xx: usize| v.at(zz, yy, xx) as f64;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let v00 = lerp(c(z0, y0, x0), c(z0, y0, x1), fx);
    let v01 = lerp(c(z0, y1, x0), c(z0, y1, x1), fx);
    let v10 = lerp(c(z1, y0, x0), c(z1, y0, x1), fx);
    let v11 = lerp(c(z1, y1, x0), c(z1, y1, x1), fx);
    let v0 = lerp(v00, v01, fy);
    let v1 = lerp(v10, v11, fy);
    lerp(v0, v1, fz) as f32
}
