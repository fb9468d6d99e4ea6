//! Memory-augmented multi-task traffic accident detection.

pub mod config;
pub mod data;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod layers;
pub mod mamr;
pub mod model;
pub mod objective;
pub mod params;
pub mod plot;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, ScoringConfig, TrainConfig, Variant};
pub use error::{Result, TadError};
pub use model::Model;

/// The guide's code listings, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/mamr.md")]
    mod mamr {}
    #[doc = include_str!("../../../book/src/decoders.md")]
    mod decoders {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
