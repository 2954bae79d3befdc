//! Segmentation of tabular data in three stages: an exact-gradient t-SNE
//! embedding, DBSCAN clustering of that embedding, and a random forest that
//! maps raw feature vectors to cluster labels and reports which features
//! separate the clusters.
//!
//! The [`evalgen`] module measures how well segments generalize to
//! out-of-sample rows with k-fold cross validation and greedy cluster
//! matching.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod dbscan;
pub mod error;
pub mod evalgen;
pub mod forest;
pub mod pipeline;
pub mod seed;
pub mod svg;
pub mod tsne;

pub use dataset::{Dataset, FoldPlan};
pub use dbscan::{ClusterAssignment, DbscanConfig, NoisePolicy};
pub use error::{Error, Result};
pub use evalgen::{GeneralizationReport, MatchingPermutation, Metrics};
pub use forest::{ForestConfig, ForestModel, MaxFeatures};
pub use pipeline::{ClusterProfileSet, PipelineConfig, SegmentationResult};
pub use tsne::{Embedding, TsneConfig};
