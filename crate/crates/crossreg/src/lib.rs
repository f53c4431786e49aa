//! Unsupervised cross-modal homography estimation.
//!
//! The crate trains a two-part model on pairs of content-aligned images from
//! different modalities: a modality-transfer generator that re-renders one
//! modality as the other, and an iterative correlation-based homography
//! estimator. Training interleaves the two so each provides supervision for
//! the other; a distillation pass then compresses the pipeline into a single
//! estimator that registers raw cross-modal pairs directly.

pub mod geometry;
pub mod nn;
