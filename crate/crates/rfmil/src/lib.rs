//! Core-scale classification of RF ultrasound biopsy cores.
//!
//! The pipeline has two stages: a convolutional feature extractor trained on
//! unlabeled ROIs with a variance/invariance/covariance objective, then a
//! transformer aggregator over each core's bag of ROI features trained
//! end-to-end on core labels. Gradient-weighted attention propagation turns
//! the trained aggregator into per-ROI relevancy maps.
//!
//! Everything runs on synthetic RF-like phantoms so the whole system is
//! trainable and verifiable on a desk.

pub mod augment;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod synth;
pub mod transformer;
pub mod vicreg;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod preprocess;
pub mod relevancy;
pub mod ssl;
pub mod stage2;
pub mod probe;

pub use error::{Error, Result};

// engine re-export so downstream code can name optimizer/param types
pub use rfmil_nn as nn;
