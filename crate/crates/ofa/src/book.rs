//! Keeps the book honest: every chapter is included as a doc comment, so
//! `cargo test --doc` compiles and runs the snippets in `book/src/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/volumes-and-grids.md")]
pub mod volumes_and_grids {}

#[doc = include_str!("../../../book/src/co-attention-targets.md")]
pub mod co_attention_targets {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/transformer.md")]
pub mod transformer {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/rollout.md")]
pub mod rollout {}

#[doc = include_str!("../../../book/src/phantoms.md")]
pub mod phantoms {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
