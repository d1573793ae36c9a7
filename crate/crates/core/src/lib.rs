//! Progressive two-stage voice trigger detection.
//!
//! The pipeline: [`synthgen`] builds a labeled corpus, [`frontend`] turns
//! audio into stacked log-Mel windows, [`model`] is a bidirectional LSTM
//! with a phonetic and a discriminative head trained by [`trainer`] on the
//! [`losses`], [`scorer`] turns candidate segments into scores with a chosen
//! amount of post-trigger context, [`decision`] runs the early/late policy,
//! and [`evalkit`] produces DET curves and reports.

pub mod audio;
pub mod checkpoint;
pub mod decision;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod frontend;
pub mod losses;
pub mod model;
pub mod scorer;
pub mod synthgen;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
