//! The attention-supervision loss, the classification loss, and their
//! weighted combination.
//!
//! The supervision loss compares the head-mean attention matrix of a
//! selected layer against the row-softmaxed co-attention target: the CLS
//! row and column are dropped and the N x N patch-patch block goes through
//! a plain mean squared error, `(1/N^2) * sum (M'_ij - A_ij)^2`, with no
//! row renormalization. Rows of the patch block may sum to less than one
//! because CLS absorbs mass; the loss therefore implicitly discourages
//! patch-to-CLS attention. The final objective is
//! `L = L_cls + alpha * sum_over_selected_layers(L_ofa)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Graph, NodeId, Shape};
use crate::opam::OpamTarget;
use crate::vit::{ForwardPass, VitError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("target size {target_n} does not match attention patch count {patches}")]
    SizeMismatch { target_n: usize, patches: usize },
    #[error("alpha > 0 requires a non-empty layer selection")]
    EmptySelection,
    #[error("alpha > 0 requires a co-attention target for every training sample")]
    MissingTarget,
    #[error("layer preset {0:?} is invalid: {1}")]
    BadPreset(String, String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Vit(#[from] VitError),
}

/// Which self-attention layers receive supervision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerPreset {
    First,
    FirstLast,
    FirstMiddleLast,
    Custom(Vec<usize>),
}

impl LayerPreset {
    /// Concrete sorted, deduplicated layer indices for a depth-L model.
    /// Middle resolves to `(L-1)/2`.
    pub fn resolve(&self, layers: usize) -> Vec<usize> {
        assert!(layers >= 1);
        let mut v = match self {
            LayerPreset::First => vec![0],
            LayerPreset::FirstLast => vec![0, layers - 1],
            LayerPreset::FirstMiddleLast => vec![0, (layers - 1) / 2, layers - 1],
            LayerPreset::Custom(v) => v.clone(),
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self, layers: usize) -> Result<Vec<usize>, LossError> {
        let v = self.resolve(layers);
        if let Some(&bad) = v.iter().find(|&&i| i >= layers) {
            return Err(LossError::BadPreset(
                self.to_string(),
                format!("layer {bad} out of range for L = {layers}"),
            ));
        }
        Ok(v)
    }
}

impl std::fmt::Display for LayerPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerPreset::First => write!(f, "first"),
            LayerPreset::FirstLast => write!(f, "first_last"),
            LayerPreset::FirstMiddleLast => write!(f, "first_middle_last"),
            LayerPreset::Custom(v) => {
                let parts: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                write!(f, "{}", parts.join("+"))
            }
        }
    }
}

impl std::str::FromStr for LayerPreset {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(LayerPreset::First),
            "first_last" => Ok(LayerPreset::FirstLast),
            "first_middle_last" => Ok(LayerPreset::FirstMiddleLast),
            other => {
                let idx: Result<Vec<usize>, _> =
                    other.split('+').map(|p| p.trim().parse::<usize>()).collect();
                match idx {
                    Ok(v) if !v.is_empty() => Ok(LayerPreset::Custom(v)),
                    _ => Err(LossError::BadPreset(
                        other.to_string(),
                        "expected first|first_last|first_middle_last or i+j+k indices".into(),
                    )),
                }
            }
        }
    }
}

impl TryFrom<String> for LayerPreset {
    type Error = LossError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LayerPreset> for String {
    fn from(p: LayerPreset) -> String {
        p.to_string()
    }
}

/// Whether the CLS token participates in the supervised matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Compare the N x N patch-patch block against the N x N target.
    #[default]
    ExcludeCls,
    /// Compare the full (N+1) x (N+1) matrix against a CLS-padded target.
    IncludeCls,
}

/// Numeric loss components of one sample or one batch.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub l_classification: f64,
    /// Per selected layer, in ascending layer order.
    pub l_ofa_per_layer: Vec<(usize, f64)>,
    pub l_ofa_total: f64,
    pub alpha: f64,
    pub l_final: f64,
}

/// Wire the supervision loss for one attention matrix node.
///
/// `attn` must be an (N+1) x (N+1) node. In [`TargetMode::ExcludeCls`] the
/// target must have n = N; in [`TargetMode::IncludeCls`], n = N + 1.
pub fn ofa_loss_node(
    graph: &mut Graph,
    attn: NodeId,
    target: &OpamTarget,
    mode: TargetMode,
) -> Result<NodeId, LossError> {
    let t = graph.shape(attn).rows;
    let patches = t - 1;
    let tnode = match mode {
        TargetMode::ExcludeCls => {
            if target.n() != patches {
                return Err(LossError::SizeMismatch { target_n: target.n(), patches });
            }
            let block = graph.submatrix(attn, 1, 1, patches, patches)?;
            let tnode =
                graph.constant(Shape::new(patches, patches), target.values().to_vec())?;
            return Ok(graph.mse(block, tnode)?);
        }
        TargetMode::IncludeCls => {
            if target.n() != t {
                return Err(LossError::SizeMismatch { target_n: target.n(), patches });
            }
            graph.constant(Shape::new(t, t), target.values().to_vec())?
        }
    };
    Ok(graph.mse(attn, tnode)?)
}

/// Plain-value version of the supervision loss, for evaluation and logging.
pub fn ofa_loss_value(attn: &[f64], n_tokens: usize, target: &OpamTarget) -> f64 {
    let n = n_tokens - 1;
    assert_eq!(attn.len(), n_tokens * n_tokens);
    assert_eq!(target.n(), n);
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = attn[(i + 1) * n_tokens + (j + 1)];
            let d = target.at(i, j) - a;
            sum += d * d;
        }
    }
    sum / (n * n) as f64
}

/// Stable binary cross-entropy of a logit against a 0/1 label.
pub fn classification_loss_value(logit: f64, label: u8) -> f64 {
    crate::diff::bce_with_logits_value(logit, label as f64)
}

/// Everything the training loop needs from one sample's loss graph.
pub struct SampleLoss {
    pub l_final: NodeId,
    pub breakdown: LossBreakdown,
}

/// Build the composite objective on top of a recorded forward pass.
///
/// With `alpha == 0` no supervision nodes are created at all, so the graph
/// (and every downstream gradient) is identical to a classification-only
/// build. `per_head` supervises each head matrix separately (averaged over
/// heads) instead of the head-mean matrix.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    fp: &mut ForwardPass,
    label: u8,
    target: Option<&OpamTarget>,
    selection: &[usize],
    alpha: f64,
    mode: TargetMode,
    per_head: bool,
) -> Result<SampleLoss, LossError> {
    let l_cls = fp.graph.bce_with_logits(fp.logit, label as f64)?;
    if alpha == 0.0 {
        let breakdown = LossBreakdown {
            l_classification: fp.graph.scalar(l_cls),
            l_ofa_per_layer: Vec::new(),
            l_ofa_total: 0.0,
            alpha,
            l_final: fp.graph.scalar(l_cls),
        };
        return Ok(SampleLoss { l_final: l_cls, breakdown });
    }
    if selection.is_empty() {
        return Err(LossError::EmptySelection);
    }
    let target = target.ok_or(LossError::MissingTarget)?;

    let mut per_layer = Vec::with_capacity(selection.len());
    let mut total: Option<NodeId> = None;
    for &layer in selection {
        let node = if per_head {
            let heads = fp
                .attn_nodes
                .get(layer)
                .ok_or(VitError::BadLayer { layer, layers: fp.attn_nodes.len() })?
                .clone();
            let mut acc: Option<NodeId> = None;
            for &h in &heads {
                let l = ofa_loss_node(&mut fp.graph, h, target, mode)?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => fp.graph.add(a, l)?,
                });
            }
            fp.graph.scale(acc.expect("at least one head"), 1.0 / heads.len() as f64)?
        } else {
            let mean = fp.mean_head_node(layer)?;
            ofa_loss_node(&mut fp.graph, mean, target, mode)?
        };
        per_layer.push((layer, fp.graph.scalar(node)));
        total = Some(match total {
            None => node,
            Some(t) => fp.graph.add(t, node)?,
        });
    }
    let total = total.expect("non-empty selection");
    let weighted = fp.graph.scale(total, alpha)?;
    let l_final = fp.graph.add(l_cls, weighted)?;
    let breakdown = LossBreakdown {
        l_classification: fp.graph.scalar(l_cls),
        l_ofa_per_layer: per_layer,
        l_ofa_total: fp.graph.scalar(total),
        alpha,
        l_final: fp.graph.scalar(l_final),
    };
    Ok(SampleLoss { l_final, breakdown })
}
