//! Dual-interpretability self-supervised pipeline for fundus-like images.
//!
//! The crate trains a small-receptive-field convolutional encoder with a
//! three-stage contrastive schedule (128-D InfoNCE, dimensionality
//! annealing, 2-D Cauchy similarity), then attaches a 1x1-convolution
//! evidence head whose spatial mean *is* the class logit. Both the 2-D
//! embedding space and the per-patch evidence maps are directly
//! inspectable, which is the point: every prediction can be traced to
//! image patches and to a position in a plottable map.
//!
//! Everything is deterministic given a master seed: data synthesis,
//! splits, augmentation, initialization, batch order, and the training
//! arithmetic itself (fixed chunking, f64 accumulation).
//!
//! See the `examples/` directory for end-to-end usage; each example covers
//! one capability (data generation, pretraining, evidence maps, 2-D
//! embedding plots, probes, sparsity sweeps, cross-validated fine-tuning).

pub mod classifier;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod projector;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
