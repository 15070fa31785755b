//! Organ-focused attention supervision for volumetric transformers.
//!
//! During training, a 3D vision transformer's self-attention is pulled
//! toward a target matrix derived from segmentation masks: patches that
//! share an organ should attend to each other. The supervision is an
//! auxiliary mean-squared-error term added to the classification loss, and
//! it only exists at training time — inference takes a bare volume, no
//! segmentation required.
//!
//! The workspace is fully self-contained at desk scale: a deterministic
//! synthetic phantom generator stands in for CT data, a double-precision
//! reverse-mode engine backs the transformer with finite-difference
//! certified gradients, and a CLI (`ofa`) drives the whole
//! synth -> train -> eval -> rollout -> sweep workflow.
//!
//! The `book/` directory in the repository root is a narrative guide to
//! the same material; its code snippets compile and run as doctests via
//! [`book`].

pub mod ckpt;
pub mod data;
pub mod diff;
pub mod losses;
pub mod metrics;
pub mod opam;
pub mod optim;
pub mod rng;
pub mod rollout;
pub mod runconfig;
pub mod synth;
pub mod train;
pub mod vit;
pub mod volgrid;
pub mod vvol;

mod book;

pub use losses::{LayerPreset, TargetMode};
pub use metrics::{MetricsReport, ScoredSet};
pub use opam::{build_opam, softmax_target, Opam, OpamTarget};
pub use runconfig::RunConfig;
pub use vit::{AttentionStack, VitConfig, VitParams};
pub use volgrid::{partition, PatchGrid, SegMask, Volume};
