//! Position-bias laboratory.
//!
//! Synthetic click logs where position bias and ranking bias are coupled,
//! CTR models with and without a position feature, and gradient
//! interpolation: mixing a position-aware and a position-unaware model with a
//! weight fitted in closed form on a small slice of random traffic.
//!
//! The guide in `book/` walks through the concepts; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod models;
pub mod nnet;
pub mod paperrepro;
pub mod synthgen;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use fusion::{FusionResult, PositionCurve};
pub use models::{ClickModel, ModelKind, TrainedModel};
pub use nnet::{Mlp, TrainConfig};
pub use synthgen::{Exposure, FeatureVector, GenConfig, QueryGroup, TrafficMode};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/overestimation.md")]
    mod overestimation {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
