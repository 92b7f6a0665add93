//! Multi-scale graph transformer for survival prediction from whole-slide
//! images, with patch-level risk maps and cell-level Cox analysis.
//!
//! The crate is organized along the data path:
//!
//! - [`ingest`]: slide bundles on disk, synthetic cohorts, time bins, folds
//! - [`graph`]: K-NN tissue graphs at two magnifications plus cross-scale links
//! - [`autodiff`]: a small tape-based reverse-mode engine
//! - [`model`]: GAT encoders, decoupled propagation, linear attention blocks
//! - [`survival`]: discrete-time loss, C-index, Kaplan-Meier, log-rank, Cox
//! - [`train`]: Adam and cross-validated training
//! - [`interpret`]: risk maps, risk-group survival curves, cell-level Cox

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod sparse;
pub mod survival;
pub mod train;
pub mod interpret;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests through these modules.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cohorts.md")]
    mod cohorts {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/survival.md")]
    mod survival {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
