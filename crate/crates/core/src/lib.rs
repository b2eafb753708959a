//! Soft neighbor contrastive learning at desk scale.
//!
//! The crate bundles everything needed to pretrain a small encoder with the
//! soft-neighbor contrastive objective and to measure what it learned:
//!
//! - [`numerics`]: dense tensors and a reverse-mode tape.
//! - [`model`]: encoder/projector/predictor stacks and their momentum copy.
//! - [`neighbor_store`]: the FIFO candidate-neighbor set with exact top-K
//!   cosine search.
//! - [`positiveness`]: parameter-free cross-attention weights for neighbors.
//! - [`objective`]: the vanilla and soft-neighbor contrastive losses.
//! - [`pipeline`]: augmentation, optimizer, schedule, and the training loop.
//! - [`eval_probe`]: kNN and linear probes plus neighbor purity.
//! - [`io`]: dataset, checkpoint, metrics, and config formats.
//! - [`synth`]: Gaussian-cluster datasets.
//! - [`gradcheck`]: finite-difference verification of the whole loss.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod error;
pub mod eval_probe;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod neighbor_store;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod positiveness;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/neighbor_store.md")]
    mod neighbor_store {}
    #[doc = include_str!("../../../book/src/positiveness.md")]
    mod positiveness {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
