//! Pseudo-label level self-training and co-training for synthetic-to-real
//! semantic segmentation adaptation.
//!
//! The segmentation model is a black box behind [`trainer::Trainer`]; this
//! crate owns everything around it: thresholds, pseudo-label curation,
//! batch mixing, collaboration between two models, evaluation and the
//! preprocessing steps.

pub mod config;
pub mod datagen;
pub mod error;
pub mod io;
pub mod labeling;
pub mod metrics;
pub mod mixing;
pub mod pipeline;
pub mod preprocess;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
