//! Multi-bias sequential recommendation.
//!
//! A user's recent interactions are split into popularity-biased,
//! subjectivity-biased and debiased short sequences. Each view is embedded
//! against its own graph-propagated item matrix, encoded by one shared
//! transformer, and the three summaries are mixed by a learned gating head
//! into a prediction vector scored against every item.

pub mod ablation;
pub mod bias_views;
pub mod corpus;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod item_graph;
pub mod model;
pub mod numeric;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
