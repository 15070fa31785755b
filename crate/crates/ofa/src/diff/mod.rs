//! Minimal reverse-mode differentiation engine in double precision.
//!
//! A [`Graph`] records ops eagerly (define-by-run): every builder computes
//! forward values immediately and appends a node, so construction order is
//! already topological. [`Graph::backward`] seeds the scalar root with 1 and
//! walks the nodes once in reverse, accumulating exact analytic gradients.
//! The op set is exactly what the volumetric transformer and its losses
//! need; there is no broadcasting beyond the row-vector bias case, which
//! keeps every backward rule short enough to audit by eye.
//!
//! All values are checked finite after every op; NaN or Inf is an error,
//! never silently propagated.

pub mod check;

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("function is not deterministic: two forward passes disagree")]
    NonDeterministic,
    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

/// Row-major 2D shape; scalars are 1x1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum OpKind {
    /// Input with no gradient flow.
    Constant,
    /// Leaf bound to a flat parameter vector (offset tracked in `param_leaves`).
    Param,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Matrix plus a row vector broadcast over rows (bias add).
    AddRow { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    RowSoftmax { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Reshape { a: NodeId },
    Transpose { a: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    /// Contiguous sub-block starting at (r0, c0), shape from the node.
    Submatrix { a: NodeId, r0: usize, c0: usize },
    Mean { a: NodeId },
    Mse { a: NodeId, b: NodeId },
    BceWithLogits { logit: NodeId, label: f64 },
}

struct Node {
    kind: OpKind,
    shape: Shape,
    values: Vec<f64>,
    grad: Vec<f64>,
}

/// Recorded computation over one set of inputs.
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(NodeId, usize)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_leaves: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].shape.len(), 1);
        self.nodes[id].values[0]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    fn push(&mut self, op: &'static str, kind: OpKind, shape: Shape, values: Vec<f64>) -> Result<NodeId, DiffError> {
        debug_assert_eq!(values.len(), shape.len());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op });
        }
        self.nodes.push(Node { kind, shape, values, grad: Vec::new() });
        Ok(self.nodes.len() - 1)
    }

    /// Input node that does not propagate gradients.
    pub fn constant(&mut self, shape: Shape, values: Vec<f64>) -> Result<NodeId, DiffError> {
        if values.len() != shape.len() {
            return Err(DiffError::ShapeMismatch {
                op: "constant",
                detail: format!("{} values for {}x{}", values.len(), shape.rows, shape.cols),
            });
        }
        self.push("constant", OpKind::Constant, shape, values)
    }

    /// Leaf copied from a flat parameter vector; after [`Self::backward`],
    /// its gradient can be gathered back at `offset` with
    /// [`Self::accumulate_param_grads`].
    pub fn param(&mut self, shape: Shape, flat: &[f64], offset: usize) -> Result<NodeId, DiffError> {
        let values = flat[offset..offset + shape.len()].to_vec();
        let id = self.push("param", OpKind::Param, shape, values)?;
        self.param_leaves.push((id, offset));
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        if sa.cols != sb.rows {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", sa.rows, sa.cols, sb.rows, sb.cols),
            });
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a].values, &self.nodes[b].values, m, k, n, &mut out);
        self.push("matmul", OpKind::Matmul { a, b }, Shape::new(m, n), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                detail: format!("{}x{} + {}x{}", sa.rows, sa.cols, sb.rows, sb.cols),
            });
        }
        let out = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        self.push("add", OpKind::Add { a, b }, sa, out)
    }

    /// `a` (r x c) plus row vector `b` (1 x c), broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        if sb.rows != 1 || sa.cols != sb.cols {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                detail: format!("{}x{} + {}x{}", sa.rows, sa.cols, sb.rows, sb.cols),
            });
        }
        let bvals = &self.nodes[b].values;
        let out = self.nodes[a]
            .values
            .chunks_exact(sa.cols)
            .flat_map(|row| row.iter().zip(bvals).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", OpKind::AddRow { a, b }, sa, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let sa = self.nodes[a].shape;
        let out = self.nodes[a].values.iter().map(|x| x * c).collect();
        self.push("scale", OpKind::Scale { a, c }, sa, out)
    }

    /// Softmax over each row, with per-row max subtraction.
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let sa = self.nodes[a].shape;
        let mut out = vec![0.0; sa.len()];
        for (orow, xrow) in out.chunks_exact_mut(sa.cols).zip(self.nodes[a].values.chunks_exact(sa.cols)) {
            let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(xrow) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push("row_softmax", OpKind::RowSoftmax { a }, sa, out)
    }

    /// Per-row layer norm with affine parameters `gamma`, `beta` (1 x cols).
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, DiffError> {
        let sa = self.nodes[a].shape;
        let (sg, sb) = (self.nodes[gamma].shape, self.nodes[beta].shape);
        if sg.rows != 1 || sb.rows != 1 || sg.cols != sa.cols || sb.cols != sa.cols {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {}x{}, gamma {}x{}, beta {}x{}",
                    sa.rows, sa.cols, sg.rows, sg.cols, sb.rows, sb.cols
                ),
            });
        }
        let c = sa.cols as f64;
        let g = &self.nodes[gamma].values;
        let b = &self.nodes[beta].values;
        let mut out = vec![0.0; sa.len()];
        for (orow, xrow) in out.chunks_exact_mut(sa.cols).zip(self.nodes[a].values.chunks_exact(sa.cols)) {
            let mean = xrow.iter().sum::<f64>() / c;
            let var = xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, (o, &x)) in orow.iter_mut().zip(xrow).enumerate() {
                *o = g[j] * (x - mean) * inv + b[j];
            }
        }
        self.push("layer_norm", OpKind::LayerNorm { a, gamma, beta, eps }, sa, out)
    }

    /// Tanh-form gaussian error linear unit.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let sa = self.nodes[a].shape;
        let out = self.nodes[a].values.iter().map(|&x| gelu_fwd(x)).collect();
        self.push("gelu", OpKind::Gelu { a }, sa, out)
    }

    /// Reinterpret the same values under a new shape of equal length.
    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId, DiffError> {
        let sa = self.nodes[a].shape;
        if sa.len() != shape.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{}x{} -> {}x{}", sa.rows, sa.cols, shape.rows, shape.cols),
            });
        }
        let out = self.nodes[a].values.clone();
        self.push("reshape", OpKind::Reshape { a }, shape, out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let sa = self.nodes[a].shape;
        let mut out = vec![0.0; sa.len()];
        for i in 0..sa.rows {
            for j in 0..sa.cols {
                out[j * sa.rows + i] = self.nodes[a].values[i * sa.cols + j];
            }
        }
        self.push("transpose", OpKind::Transpose { a }, Shape::new(sa.cols, sa.rows), out)
    }

    /// Stack vertically; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let cols = self.nodes[parts[0]].shape.cols;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let sp = self.nodes[p].shape;
            if sp.cols != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {} vs {}", cols, sp.cols),
                });
            }
            rows += sp.rows;
            out.extend_from_slice(&self.nodes[p].values);
        }
        self.push(
            "concat_rows",
            OpKind::ConcatRows { parts: parts.to_vec() },
            Shape::new(rows, cols),
            out,
        )
    }

    /// Stack horizontally; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let rows = self.nodes[parts[0]].shape.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].shape.cols).sum();
        let mut out = vec![0.0; rows * cols];
        let mut col0 = 0;
        for &p in parts {
            let sp = self.nodes[p].shape;
            if sp.rows != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", rows, sp.rows),
                });
            }
            for i in 0..rows {
                out[i * cols + col0..i * cols + col0 + sp.cols]
                    .copy_from_slice(&self.nodes[p].values[i * sp.cols..(i + 1) * sp.cols]);
            }
            col0 += sp.cols;
        }
        self.push(
            "concat_cols",
            OpKind::ConcatCols { parts: parts.to_vec() },
            Shape::new(rows, cols),
            out,
        )
    }

    /// Contiguous sub-block `[r0, r0+rows) x [c0, c0+cols)`.
    pub fn submatrix(
        &mut self,
        a: NodeId,
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId, DiffError> {
        let sa = self.nodes[a].shape;
        if r0 + rows > sa.rows || c0 + cols > sa.cols {
            return Err(DiffError::ShapeMismatch {
                op: "submatrix",
                detail: format!(
                    "block ({r0}+{rows}, {c0}+{cols}) out of {}x{}",
                    sa.rows, sa.cols
                ),
            });
        }
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let src = (r0 + i) * sa.cols + c0;
            out[i * cols..(i + 1) * cols].copy_from_slice(&self.nodes[a].values[src..src + cols]);
        }
        self.push("submatrix", OpKind::Submatrix { a, r0, c0 }, Shape::new(rows, cols), out)
    }

    /// Mean over all entries, to a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let len = self.nodes[a].shape.len() as f64;
        let v = self.nodes[a].values.iter().sum::<f64>() / len;
        self.push("mean", OpKind::Mean { a }, Shape::new(1, 1), vec![v])
    }

    /// Mean squared error between two same-shape nodes, to a scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op: "mse",
                detail: format!("{}x{} vs {}x{}", sa.rows, sa.cols, sb.rows, sb.cols),
            });
        }
        let len = sa.len() as f64;
        let v = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / len;
        self.push("mse", OpKind::Mse { a, b }, Shape::new(1, 1), vec![v])
    }

    /// Stable binary cross-entropy on a scalar logit against a fixed 0/1 label.
    pub fn bce_with_logits(&mut self, logit: NodeId, label: f64) -> Result<NodeId, DiffError> {
        let s = self.nodes[logit].shape;
        if s.len() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("logit must be scalar, got {}x{}", s.rows, s.cols),
            });
        }
        let x = self.nodes[logit].values[0];
        let v = bce_with_logits_value(x, label);
        self.push("bce_with_logits", OpKind::BceWithLogits { logit, label }, Shape::new(1, 1), vec![v])
    }

    /// Reverse sweep from a scalar root. Each node is visited exactly once,
    /// in reverse construction (= reverse topological) order.
    pub fn backward(&mut self, root: NodeId) -> Result<(), DiffError> {
        let rs = self.nodes[root].shape;
        if rs.len() != 1 {
            return Err(DiffError::NonScalarRoot { rows: rs.rows, cols: rs.cols });
        }
        for node in &mut self.nodes {
            node.grad.clear();
            node.grad.resize(node.shape.len(), 0.0);
        }
        self.nodes[root].grad[0] = 1.0;

        for i in (0..=root).rev() {
            // Detach this node's grad so parents can be borrowed mutably.
            let g = std::mem::take(&mut self.nodes[i].grad);
            if g.iter().all(|&v| v == 0.0) {
                self.nodes[i].grad = g;
                continue;
            }
            let kind = self.nodes[i].kind.clone();
            let shape = self.nodes[i].shape;
            match kind {
                OpKind::Constant | OpKind::Param => {}
                OpKind::Matmul { a, b } => self.backward_matmul(a, b, &g),
                OpKind::Add { a, b } => {
                    if a == b {
                        for (pg, gv) in self.nodes[a].grad.iter_mut().zip(&g) {
                            *pg += 2.0 * gv;
                        }
                    } else {
                        for (pg, gv) in self.nodes[a].grad.iter_mut().zip(&g) {
                            *pg += gv;
                        }
                        for (pg, gv) in self.nodes[b].grad.iter_mut().zip(&g) {
                            *pg += gv;
                        }
                    }
                }
                OpKind::AddRow { a, b } => {
                    let cols = shape.cols;
                    for (pg, gv) in self.nodes[a].grad.iter_mut().zip(&g) {
                        *pg += gv;
                    }
                    for grow in g.chunks_exact(cols) {
                        for (pg, gv) in self.nodes[b].grad.iter_mut().zip(grow) {
                            *pg += gv;
                        }
                    }
                }
                OpKind::Scale { a, c } => {
                    for (pg, gv) in self.nodes[a].grad.iter_mut().zip(&g) {
                        *pg += c * gv;
                    }
                }
                OpKind::RowSoftmax { a } => {
                    let cols = shape.cols;
                    let y = std::mem::take(&mut self.nodes[i].values);
                    {
                        let pa = &mut self.nodes[a];
                        for ((grow, yrow), parow) in g
                            .chunks_exact(cols)
                            .zip(y.chunks_exact(cols))
                            .zip(pa.grad.chunks_exact_mut(cols))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                            for ((pg, &gv), &yv) in parow.iter_mut().zip(grow).zip(yrow) {
                                *pg += yv * (gv - dot);
                            }
                        }
                    }
                    self.nodes[i].values = y;
                }
                OpKind::LayerNorm { a, gamma, beta, eps } => {
                    self.backward_layer_norm(a, gamma, beta, eps, shape, &g);
                }
                OpKind::Gelu { a } => {
                    let pa = &mut self.nodes[a];
                    let x: Vec<f64> = pa.values.clone();
                    for ((pg, gv), xv) in pa.grad.iter_mut().zip(&g).zip(&x) {
                        *pg += gv * gelu_grad(*xv);
                    }
                }
                OpKind::Reshape { a } => {
                    for (pg, gv) in self.nodes[a].grad.iter_mut().zip(&g) {
                        *pg += gv;
                    }
                }
                OpKind::Transpose { a } => {
                    let sa = self.nodes[a].shape;
                    let pg = &mut self.nodes[a].grad;
                    for r in 0..shape.rows {
                        for c in 0..shape.cols {
                            pg[c * sa.cols + r] += g[r * shape.cols + c];
                        }
                    }
                }
                OpKind::ConcatRows { parts } => {
                    let cols = shape.cols;
                    let mut row0 = 0;
                    for p in parts {
                        let rows = self.nodes[p].shape.rows;
                        let slice = &g[row0 * cols..(row0 + rows) * cols];
                        for (pg, gv) in self.nodes[p].grad.iter_mut().zip(slice) {
                            *pg += gv;
                        }
                        row0 += rows;
                    }
                }
                OpKind::ConcatCols { parts } => {
                    let cols = shape.cols;
                    let mut col0 = 0;
                    for p in parts {
                        let sp = self.nodes[p].shape;
                        let pg = &mut self.nodes[p].grad;
                        for i in 0..sp.rows {
                            let src = &g[i * cols + col0..i * cols + col0 + sp.cols];
                            for (pgv, gv) in pg[i * sp.cols..(i + 1) * sp.cols].iter_mut().zip(src) {
                                *pgv += gv;
                            }
                        }
                        col0 += sp.cols;
                    }
                }
                OpKind::Submatrix { a, r0, c0 } => {
                    let sa = self.nodes[a].shape;
                    let pg = &mut self.nodes[a].grad;
                    for i in 0..shape.rows {
                        let dst = (r0 + i) * sa.cols + c0;
                        for (pgv, gv) in pg[dst..dst + shape.cols]
                            .iter_mut()
                            .zip(&g[i * shape.cols..(i + 1) * shape.cols])
                        {
                            *pgv += gv;
                        }
                    }
                }
                OpKind::Mean { a } => {
                    let inv = 1.0 / self.nodes[a].shape.len() as f64;
                    let gv = g[0] * inv;
                    for pg in self.nodes[a].grad.iter_mut() {
                        *pg += gv;
                    }
                }
                OpKind::Mse { a, b } => {
                    let inv = 2.0 * g[0] / self.nodes[a].shape.len() as f64;
                    if a == b {
                        // d/da mean((a-a)^2) = 0
                    } else {
                        let (na, nb) = pair_mut(&mut self.nodes, a, b);
                        for (((ag, bg), av), bv) in na
                            .grad
                            .iter_mut()
                            .zip(nb.grad.iter_mut())
                            .zip(&na.values)
                            .zip(&nb.values)
                        {
                            let d = inv * (av - bv);
                            *ag += d;
                            *bg -= d;
                        }
                    }
                }
                OpKind::BceWithLogits { logit, label } => {
                    let x = self.nodes[logit].values[0];
                    self.nodes[logit].grad[0] += g[0] * (sigmoid(x) - label);
                }
            }
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn backward_matmul(&mut self, a: NodeId, b: NodeId, g: &[f64]) {
        let sa = self.nodes[a].shape;
        let sb = self.nodes[b].shape;
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        if a == b {
            // dX for Y = X X: g Xt + Xt g
            let x = self.nodes[a].values.clone();
            let pg = &mut self.nodes[a].grad;
            accumulate_grad_a(g, &x, m, k, n, pg);
            accumulate_grad_b(&x, g, m, k, n, pg);
            return;
        }
        let (na, nb) = pair_mut(&mut self.nodes, a, b);
        // dA += g * B^T
        accumulate_grad_a(g, &nb.values, m, k, n, &mut na.grad);
        // dB += A^T * g
        accumulate_grad_b(&na.values, g, m, k, n, &mut nb.grad);
    }

    fn backward_layer_norm(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        shape: Shape,
        g: &[f64],
    ) {
        let cols = shape.cols;
        let c = cols as f64;
        let x = self.nodes[a].values.clone();
        let gam = self.nodes[gamma].values.clone();
        let mut dx = vec![0.0; x.len()];
        let mut dgamma = vec![0.0; cols];
        let mut dbeta = vec![0.0; cols];
        for (row, (xrow, grow)) in x.chunks_exact(cols).zip(g.chunks_exact(cols)).enumerate() {
            let mean = xrow.iter().sum::<f64>() / c;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
            let dxhat: Vec<f64> = grow.iter().zip(&gam).map(|(gv, gm)| gv * gm).collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / c;
            let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / c;
            for j in 0..cols {
                dx[row * cols + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                dgamma[j] += grow[j] * xhat[j];
                dbeta[j] += grow[j];
            }
        }
        for (pg, d) in self.nodes[a].grad.iter_mut().zip(&dx) {
            *pg += d;
        }
        for (pg, d) in self.nodes[gamma].grad.iter_mut().zip(&dgamma) {
            *pg += d;
        }
        for (pg, d) in self.nodes[beta].grad.iter_mut().zip(&dbeta) {
            *pg += d;
        }
    }

    /// Add every parameter leaf's gradient into `out` at the leaf's offset.
    pub fn accumulate_param_grads(&self, out: &mut [f64]) {
        for &(id, offset) in &self.param_leaves {
            let node = &self.nodes[id];
            for (o, g) in out[offset..offset + node.shape.len()].iter_mut().zip(&node.grad) {
                *o += g;
            }
        }
    }
}

/// out += a * b for row-major a (m x k), b (k x n).
pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// dA += g * B^T, with g (m x n), B (k x n), dA (m x k).
fn accumulate_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, d) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *d += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// dB += A^T * g, with A (m x k), g (m x n), dB (k x n).
fn accumulate_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in dbrow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

fn pair_mut(nodes: &mut [Node], a: usize, b: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = nodes.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// max(x,0) - x*y + ln(1 + exp(-|x|)): the overflow-free form.
pub(crate) fn bce_with_logits_value(x: f64, label: f64) -> f64 {
    x.max(0.0) - x * label + (-x.abs()).exp().ln_1p()
}
