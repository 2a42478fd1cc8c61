//! Partition eddy covariance evapotranspiration into evaporation and
//! transpiration.
//!
//! An evaporation model is trained on night records, where transpiration is
//! zero, and applied everywhere; transpiration is the remainder. The modules
//! follow the pipeline order: [`ingest`], [`preprocess`], [`periods`],
//! [`models`] and [`metrics`], [`harness`], [`rfe`], [`partition`]. The
//! [`pipeline`] module runs them end to end from a [`config::RunConfig`].

pub mod ingest;
pub mod metrics;
pub mod models;
pub mod periods;
pub mod preprocess;
pub mod harness;
pub mod seed;
pub mod partition;
pub mod rfe;
pub mod synth;
pub mod config;
pub mod report;
pub mod pipeline;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/periods.md")]
    mod periods {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/partition.md")]
    mod partition {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
