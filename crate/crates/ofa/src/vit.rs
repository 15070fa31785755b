//! 3D vision transformer classifier with exposed attention.
//!
//! A volume is partitioned into N uniform patches; each patch block is
//! flattened and linearly projected to the embedding dimension, a learnable
//! CLS token is prepended (token 0), and learnable positional embeddings
//! are added. Blocks are pre-norm: `x + MHA(LN(x))` then `x + MLP(LN(x))`.
//! The malignancy logit is a linear head over the final-layer-normed CLS
//! embedding. Every layer's post-softmax attention matrices are captured,
//! both as plain values (for rollout and inspection) and as graph nodes so
//! losses can differentiate through them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::{CkptError, TensorFile};
use crate::diff::{DiffError, Graph, NodeId, Shape};
use crate::volgrid::{partition, PatchGrid, VolError, Volume};

#[derive(Debug, Error)]
pub enum VitError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("volume dims {0:?} do not match config input dims {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("layer index {layer} out of range (L = {layers})")]
    BadLayer { layer: usize, layers: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub input_dims: [usize; 3],
    pub patch_size: [usize; 3],
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
    /// Fixed affine intensity normalization applied per voxel before the
    /// patch projection: `(v - input_center) / input_scale`. Keeps
    /// tokenization local to each patch.
    pub input_center: f64,
    pub input_scale: f64,
    pub seed: u64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl VitConfig {
    /// Desk-scale default: 24^3 volumes, 8^3 patches (N = 27), 4 layers,
    /// 4 heads, 64-dim embeddings. Trains in minutes on a CPU.
    pub fn toy() -> Self {
        Self {
            input_dims: [24, 24, 24],
            patch_size: [8, 8, 8],
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4.0,
            n_classes: 1,
            input_center: 0.375,
            input_scale: 0.15,
            seed: 0,
        }
    }

    /// Full-scale shape: 96^3 volumes, 16^3 patches (N = 216), 12 layers
    /// and 12 heads.
    pub fn paper_scale() -> Self {
        Self {
            input_dims: [96, 96, 96],
            patch_size: [16, 16, 16],
            embed_dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4.0,
            n_classes: 1,
            input_center: 0.0,
            input_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<PatchGrid, VitError> {
        if self.layers == 0 {
            return Err(VitError::BadConfig("layers must be >= 1".into()));
        }
        if self.heads == 0 || self.embed_dim == 0 {
            return Err(VitError::BadConfig("heads and embed_dim must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(VitError::BadConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.n_classes != 1 {
            return Err(VitError::BadConfig("only a single-logit binary head is supported".into()));
        }
        if self.mlp_hidden() == 0 {
            return Err(VitError::BadConfig("mlp_ratio too small".into()));
        }
        if !(self.input_scale > 0.0) || !self.input_scale.is_finite() || !self.input_center.is_finite() {
            return Err(VitError::BadConfig("input normalization must be finite with positive scale".into()));
        }
        partition(self.input_dims, self.patch_size).map_err(VitError::from)
    }

    pub fn grid(&self) -> PatchGrid {
        partition(self.input_dims, self.patch_size).expect("validated config")
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn n_patches(&self) -> usize {
        self.grid().patch_count()
    }

    /// Patch tokens plus CLS.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Ordered directory of parameter tensors inside the flat vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &VitConfig) -> Self {
        let grid = cfg.grid();
        let v = grid.patch_voxels();
        let d = cfg.embed_dim;
        let t = grid.patch_count() + 1;
        let h = cfg.mlp_hidden();
        let mut b = LayoutBuilder::default();
        b.add("patch_embed.w", v, d);
        b.add("patch_embed.b", 1, d);
        b.add("cls", 1, d);
        b.add("pos", t, d);
        for l in 0..cfg.layers {
            b.add(&format!("layers.{l}.ln1.gamma"), 1, d);
            b.add(&format!("layers.{l}.ln1.beta"), 1, d);
            for p in ["q", "k", "v", "out"] {
                b.add(&format!("layers.{l}.attn.{p}.w"), d, d);
                b.add(&format!("layers.{l}.attn.{p}.b"), 1, d);
            }
            b.add(&format!("layers.{l}.ln2.gamma"), 1, d);
            b.add(&format!("layers.{l}.ln2.beta"), 1, d);
            b.add(&format!("layers.{l}.mlp.fc1.w"), d, h);
            b.add(&format!("layers.{l}.mlp.fc1.b"), 1, h);
            b.add(&format!("layers.{l}.mlp.fc2.w"), h, d);
            b.add(&format!("layers.{l}.mlp.fc2.b"), 1, d);
        }
        b.add("final_ln.gamma", 1, d);
        b.add("final_ln.beta", 1, d);
        b.add("head.w", d, 1);
        b.add("head.b", 1, 1);
        ParamLayout { specs: b.specs, total: b.total }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn spec(&self, name: &str) -> &TensorSpec {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: &str, rows: usize, cols: usize) {
        self.specs.push(TensorSpec { name: name.to_string(), rows, cols, offset: self.total });
        self.total += rows * cols;
    }
}

/// All learnable parameters as one flat f64 vector plus its directory.
#[derive(Debug, Clone)]
pub struct VitParams {
    pub config: VitConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl VitParams {
    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        let s = self.layout.spec(name);
        &self.data[s.offset..s.offset + s.rows * s.cols]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let s = self.layout.spec(name).clone();
        &mut self.data[s.offset..s.offset + s.rows * s.cols]
    }
}

/// Initialize parameters: weights, CLS, and positional embeddings from a
/// truncated normal (std 0.02, clipped at two sigma), biases zero, layer
/// norm gains one. Deterministic for a given config seed.
pub fn init(config: &VitConfig) -> Result<VitParams, VitError> {
    config.validate()?;
    let layout = ParamLayout::for_config(config);
    let mut data = vec![0.0; layout.total_len()];
    let mut rng = crate::rng::stream(config.seed, "vit-init", &[]);
    for spec in layout.specs() {
        let slice = &mut data[spec.offset..spec.offset + spec.rows * spec.cols];
        let name = spec.name.as_str();
        if name.ends_with(".gamma") {
            slice.fill(1.0);
        } else if name.ends_with(".beta") || name.ends_with(".b") {
            // biases stay zero
        } else {
            for v in slice.iter_mut() {
                *v = trunc_normal(&mut rng, 0.02);
            }
        }
    }
    Ok(VitParams { config: config.clone(), layout, data })
}

fn trunc_normal(rng: &mut rand_chacha::ChaCha20Rng, std: f64) -> f64 {
    use rand::Rng;
    // Box-Muller, rejecting draws beyond two standard deviations.
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Per-layer, per-head post-softmax attention matrices, copied out of the
/// graph. Token 0 is CLS; tokens 1..=N are patches in grid order.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub n_tokens: usize,
    /// `layers[l][h]` is an `n_tokens x n_tokens` row-major matrix.
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionStack {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }
}

/// Elementwise mean over the head matrices of one layer.
pub fn mean_head_attention(attn: &AttentionStack, layer: usize) -> Result<Vec<f64>, VitError> {
    let l = attn
        .layers
        .get(layer)
        .ok_or(VitError::BadLayer { layer, layers: attn.n_layers() })?;
    let n = attn.n_tokens * attn.n_tokens;
    let mut out = vec![0.0; n];
    for head in l {
        for (o, v) in out.iter_mut().zip(head) {
            *o += v;
        }
    }
    let inv = 1.0 / l.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// One recorded forward pass: the graph, the logit node, and handles to
/// every attention matrix so losses can be wired on top.
pub struct ForwardPass {
    pub graph: Graph,
    pub logit: NodeId,
    /// `attn_nodes[l][h]`: graph node of head h's attention in layer l.
    pub attn_nodes: Vec<Vec<NodeId>>,
    pub n_tokens: usize,
}

impl ForwardPass {
    pub fn logit_value(&self) -> f64 {
        self.graph.scalar(self.logit)
    }

    pub fn attention_stack(&self) -> AttentionStack {
        let layers = self
            .attn_nodes
            .iter()
            .map(|heads| heads.iter().map(|&id| self.graph.values(id).to_vec()).collect())
            .collect();
        AttentionStack { n_tokens: self.n_tokens, layers }
    }

    /// Graph node holding the head-mean attention of one layer.
    pub fn mean_head_node(&mut self, layer: usize) -> Result<NodeId, VitError> {
        let heads = self
            .attn_nodes
            .get(layer)
            .ok_or(VitError::BadLayer { layer, layers: self.attn_nodes.len() })?
            .clone();
        let mut acc = heads[0];
        for &h in &heads[1..] {
            acc = self.graph.add(acc, h)?;
        }
        Ok(self.graph.scale(acc, 1.0 / heads.len() as f64)?)
    }
}

/// Flatten each patch block of the volume into one row (patch-local
/// z -> y -> x order): an N x patch_voxels matrix in grid order.
pub fn patch_matrix(volume: &Volume, grid: &PatchGrid) -> Vec<f64> {
    let n = grid.patch_count();
    let v = grid.patch_voxels();
    let mut out = vec![0.0; n * v];
    for p in 0..n {
        let [zr, yr, xr] = grid.patch_block(p);
        let row = &mut out[p * v..(p + 1) * v];
        let mut i = 0;
        for z in zr.clone() {
            for y in yr.clone() {
                for x in xr.clone() {
                    row[i] = volume.at(z, y, x) as f64;
                    i += 1;
                }
            }
        }
    }
    out
}

/// Run the transformer over one volume, recording the full graph.
pub fn forward(params: &VitParams, volume: &Volume) -> Result<ForwardPass, VitError> {
    let cfg = &params.config;
    if volume.dims() != cfg.input_dims {
        return Err(VitError::DimMismatch(volume.dims(), cfg.input_dims));
    }
    let grid = cfg.grid();
    let n = grid.patch_count();
    let t = n + 1;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let eps = 1e-5;

    let mut g = Graph::new();
    let flat = &params.data;
    let param_node = |g: &mut Graph, name: &str| -> Result<NodeId, DiffError> {
        let s = params.layout.spec(name);
        g.param(Shape::new(s.rows, s.cols), flat, s.offset)
    };

    // Tokenization.
    let mut voxels = patch_matrix(volume, &grid);
    for v in voxels.iter_mut() {
        *v = (*v - cfg.input_center) / cfg.input_scale;
    }
    let patches = g.constant(Shape::new(n, grid.patch_voxels()), voxels)?;
    let embed_w = param_node(&mut g, "patch_embed.w")?;
    let embed_b = param_node(&mut g, "patch_embed.b")?;
    let projected = g.matmul(patches, embed_w)?;
    let patch_tokens = g.add_row(projected, embed_b)?;
    let cls = param_node(&mut g, "cls")?;
    let stacked = g.concat_rows(&[cls, patch_tokens])?;
    let pos = param_node(&mut g, "pos")?;
    let mut tokens = g.add(stacked, pos)?;

    let mut attn_nodes = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let name = |p: &str| format!("layers.{l}.{p}");
        // Attention sub-block.
        let ln1_g = param_node(&mut g, &name("ln1.gamma"))?;
        let ln1_b = param_node(&mut g, &name("ln1.beta"))?;
        let normed = g.layer_norm(tokens, ln1_g, ln1_b, eps)?;
        let proj = |g: &mut Graph, p: &str| -> Result<NodeId, VitError> {
            let w = param_node(g, &name(&format!("attn.{p}.w")))?;
            let b = param_node(g, &name(&format!("attn.{p}.b")))?;
            let y = g.matmul(normed, w)?;
            Ok(g.add_row(y, b)?)
        };
        let q = proj(&mut g, "q")?;
        let k = proj(&mut g, "k")?;
        let v = proj(&mut g, "v")?;

        let mut head_attn = Vec::with_capacity(cfg.heads);
        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let c0 = h * dh;
            let qh = g.submatrix(q, 0, c0, t, dh)?;
            let kh = g.submatrix(k, 0, c0, t, dh)?;
            let vh = g.submatrix(v, 0, c0, t, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale)?;
            let attn = g.row_softmax(scaled)?;
            head_attn.push(attn);
            head_ctx.push(g.matmul(attn, vh)?);
        }
        attn_nodes.push(head_attn);
        let ctx = g.concat_cols(&head_ctx)?;
        let out_w = param_node(&mut g, &name("attn.out.w"))?;
        let out_b = param_node(&mut g, &name("attn.out.b"))?;
        let attn_out = g.matmul(ctx, out_w)?;
        let attn_out = g.add_row(attn_out, out_b)?;
        tokens = g.add(tokens, attn_out)?;

        // MLP sub-block.
        let ln2_g = param_node(&mut g, &name("ln2.gamma"))?;
        let ln2_b = param_node(&mut g, &name("ln2.beta"))?;
        let normed = g.layer_norm(tokens, ln2_g, ln2_b, eps)?;
        let fc1_w = param_node(&mut g, &name("mlp.fc1.w"))?;
        let fc1_b = param_node(&mut g, &name("mlp.fc1.b"))?;
        let hidden = g.matmul(normed, fc1_w)?;
        let hidden = g.add_row(hidden, fc1_b)?;
        let hidden = g.gelu(hidden)?;
        let fc2_w = param_node(&mut g, &name("mlp.fc2.w"))?;
        let fc2_b = param_node(&mut g, &name("mlp.fc2.b"))?;
        let mlp_out = g.matmul(hidden, fc2_w)?;
        let mlp_out = g.add_row(mlp_out, fc2_b)?;
        tokens = g.add(tokens, mlp_out)?;
    }

    let fln_g = param_node(&mut g, "final_ln.gamma")?;
    let fln_b = param_node(&mut g, "final_ln.beta")?;
    let final_tokens = g.layer_norm(tokens, fln_g, fln_b, eps)?;
    let cls_out = g.submatrix(final_tokens, 0, 0, 1, d)?;
    let head_w = param_node(&mut g, "head.w")?;
    let head_b = param_node(&mut g, "head.b")?;
    let logit = g.matmul(cls_out, head_w)?;
    let logit = g.add(logit, head_b)?;

    Ok(ForwardPass { graph: g, logit, attn_nodes, n_tokens: t })
}

/// Save parameters (plus optional extra tensors such as optimizer state)
/// to a checkpoint file.
pub fn save_checkpoint(
    params: &VitParams,
    extra_meta: serde_json::Value,
    extra_tensors: &[(&str, &[f64])],
    path: &std::path::Path,
) -> Result<(), VitError> {
    let meta = serde_json::json!({
        "config": params.config,
        "extra": extra_meta,
    });
    let mut tf = TensorFile::new(meta);
    for spec in params.layout.specs() {
        tf.push(&spec.name, spec.rows, spec.cols, params.tensor(&spec.name));
    }
    for (name, values) in extra_tensors {
        tf.push(name, 1, values.len(), values);
    }
    tf.save(path)?;
    Ok(())
}

/// Load a checkpoint; returns the rebuilt parameters plus the raw tensor
/// file for any extra tensors stored alongside.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(VitParams, TensorFile), VitError> {
    let tf = TensorFile::load(path)?;
    let config: VitConfig = serde_json::from_value(tf.meta["config"].clone())
        .map_err(|e| VitError::BadConfig(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let layout = ParamLayout::for_config(&config);
    let mut data = vec![0.0; layout.total_len()];
    for spec in layout.specs() {
        let (rows, cols, values) = tf.get(&spec.name)?;
        if rows != spec.rows || cols != spec.cols {
            return Err(VitError::BadConfig(format!(
                "tensor {} has shape {}x{}, expected {}x{}",
                spec.name, rows, cols, spec.rows, spec.cols
            )));
        }
        data[spec.offset..spec.offset + rows * cols].copy_from_slice(values);
    }
    Ok((VitParams { config, layout, data }, tf))
}
