//! Detection and measurement of post-event growth gaps in longitudinal
//! panels of topics.
//!
//! The pipeline: load a [`panel::Panel`], match each treated topic to
//! controls with fine balance ([`matching`]), estimate gap series
//! ([`effects`]) and regressions ([`inference`]), and run robustness checks
//! ([`diagnostics`]). [`synth`] generates panels with known ground truth.

pub mod effects;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod matching;
pub mod panel;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
