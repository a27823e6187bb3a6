//! Structured learning by reduction to biased logistic regression.
//!
//! Entropy-smoothed message passing over pairwise region graphs is
//! alternated with per-factor logistic regression fits, where each training
//! row carries a bias vector derived from the current messages and the
//! Hamming loss. Any fitter that maximizes the biased logistic objective can
//! serve as the unary or pairwise classifier: zero, constant, linear,
//! multi-layer perceptron, or gradient-boosted trees.

pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod loss;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
pub use data::{Dataset, Example};
pub use graph::{Region, RegionGraph};
pub use oracle::{Classifier, OracleKind};
pub use trainer::{Model, TrainConfig};
