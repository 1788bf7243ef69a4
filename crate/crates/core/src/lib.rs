//! Task-oriented grasp evaluation with foundation-model knowledge.
//!
//! The crate covers the full offline pipeline: procedural datasets with an
//! analytic oracle, knowledge generation through pluggable language and vision
//! backends, a point-cloud plus language evaluator trained with a small
//! reverse-mode autodiff engine, and average-precision reporting.

pub mod backends;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
