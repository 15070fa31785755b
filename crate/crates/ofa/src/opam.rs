//! Organ patch co-attention matrix `M` and its row-softmax target `M'`.
//!
//! `M` is a binary N x N matrix over the patches of a grid: `m[i][j] = 1`
//! iff some nonzero label is present in both patch i and patch j. An organ
//! patch therefore always has `m[i][i] = 1`, and background-patch rows are
//! all-zero. `M'` row-softmaxes each binary row, which gives organ columns
//! an `e : 1` advantage over the rest rather than a hard indicator; an
//! all-zero row becomes the uniform row `1/N`.

use crate::volgrid::{PatchGrid, SegMask, VolError};

/// Binary N x N co-attention matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Opam {
    n: usize,
    m: Vec<u8>,
}

impl Opam {
    /// Build directly from the per-row bits. Intended for tests and tooling;
    /// training code goes through [`build_opam`].
    pub fn from_bits(n: usize, m: Vec<u8>) -> Self {
        assert_eq!(m.len(), n * n);
        assert!(m.iter().all(|&b| b <= 1), "entries must be 0 or 1");
        Self { n, m }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> &[u8] {
        &self.m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.m[i * self.n + j]
    }

    /// Patch indices whose diagonal entry is set, i.e. the organ patches.
    pub fn organ_patch_set(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.at(i, i) == 1).collect()
    }

    /// Row-major f64 copy, for matrix dumps.
    pub fn to_f64(&self) -> Vec<f64> {
        self.m.iter().map(|&b| b as f64).collect()
    }
}

/// Row-stochastic N x N target matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OpamTarget {
    n: usize,
    t: Vec<f64>,
}

impl OpamTarget {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.t
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.n + j]
    }
}

/// Build the co-attention matrix from a mask: patches are connected when
/// they share at least one nonzero label with at least `min_voxels` voxels
/// of that label in each patch.
///
/// `min_voxels = 1` is the default reading: any nonzero voxel makes a patch
/// an organ patch.
pub fn build_opam_with_threshold(
    mask: &SegMask,
    grid: &PatchGrid,
    min_voxels: usize,
) -> Result<Opam, VolError> {
    if mask.dims() != grid.volume_dims() {
        return Err(VolError::DimMismatch(mask.dims(), grid.volume_dims()));
    }
    let n = grid.patch_count();
    // Voxel counts per (patch, label).
    let mut counts: Vec<std::collections::BTreeMap<u8, usize>> = vec![Default::default(); n];
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
        *counts[patch].entry(label).or_insert(0) += 1;
    }
    let sets: Vec<Vec<u8>> = counts
        .iter()
        .map(|c| c.iter().filter(|(_, &n)| n >= min_voxels).map(|(&l, _)| l).collect())
        .collect();

    let mut m = vec![0u8; n * n];
    for i in 0..n {
        if sets[i].is_empty() {
            continue;
        }
        for j in i..n {
            if shares_label(&sets[i], &sets[j]) {
                m[i * n + j] = 1;
                m[j * n + i] = 1;
            }
        }
    }
    Ok(Opam { n, m })
}

/// [`build_opam_with_threshold`] with the one-voxel default.
pub fn build_opam(mask: &SegMask, grid: &PatchGrid) -> Result<Opam, VolError> {
    build_opam_with_threshold(mask, grid, 1)
}

fn shares_label(a: &[u8], b: &[u8]) -> bool {
    // Both sorted and tiny; linear merge.
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Row-wise softmax of the binary matrix.
///
/// A row with k ones maps to `e / (k*e + (N-k))` over the ones and
/// `1 / (k*e + (N-k))` elsewhere; an all-zero row is uniform `1/N`.
pub fn softmax_target(opam: &Opam) -> OpamTarget {
    let n = opam.n;
    let mut t = vec![0.0f64; n * n];
    for i in 0..n {
        let row = &opam.m[i * n..(i + 1) * n];
        let out = &mut t[i * n..(i + 1) * n];
        row_softmax_binary(row, out);
    }
    OpamTarget { n, t }
}

/// Stable softmax of one binary row (max subtraction then normalize).
fn row_softmax_binary(row: &[u8], out: &mut [f64]) {
    let max = if row.iter().any(|&b| b == 1) { 1.0 } else { 0.0 };
    let mut sum = 0.0;
    for (o, &b) in out.iter_mut().zip(row.iter()) {
        let e = (b as f64 - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Pad `M` with an all-zero leading row and column (the CLS slot) and
/// row-softmax the (N+1) x (N+1) result. Used by the optional supervision
/// mode that includes the CLS token in the target.
pub fn softmax_target_with_cls(opam: &Opam) -> OpamTarget {
    let n = opam.n + 1;
    let mut t = vec![0.0f64; n * n];
    let mut row = vec![0u8; n];
    // CLS row is all-zero -> uniform.
    row_softmax_binary(&row, &mut t[0..n]);
    for i in 0..opam.n {
        row[0] = 0;
        row[1..].copy_from_slice(&opam.m[i * opam.n..(i + 1) * opam.n]);
        row_softmax_binary(&row, &mut t[(i + 1) * n..(i + 2) * n]);
    }
    OpamTarget { n, t }
}
