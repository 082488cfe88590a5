//! Snapshot-based self-supervised semantic segmentation of point-cloud scenes.
//!
//! The pipeline samples kNN "snapshots" around random anchors, learns
//! snapshot features with contrastive pretext tasks followed by
//! cluster-classification, fits a linear classifier on a small labelled
//! fraction (optionally widened by cluster-based pseudo-labels), and turns
//! snapshot predictions into point-wise labels by voting.

pub mod clustering;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod pretext;
pub mod scene_io;
pub mod segmenter;
pub mod snapshot;
pub mod spatial_index;
pub mod synth;
pub mod weak_classifier;

pub use error::{Error, Result};
