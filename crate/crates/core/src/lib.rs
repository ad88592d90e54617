//! Wearable activity-recognition pipeline.
//!
//! Raw heart-rate, step/distance, sleep and schedule streams are fused onto a
//! one-minute grid ([`align`]), unknown sleep states are resolved with
//! heart-rate rules ([`impute`]), labelled sliding windows are built and split
//! ([`dataset`]), and a two-head bidirectional LSTM is trained with a
//! hierarchical focal loss ([`model`]) and scored ([`eval`]). [`synth`]
//! generates cohorts with known ground truth and [`viz`] renders radar charts
//! of an individual against the group.

pub mod align;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod eval;
pub mod impute;
pub mod ingest;
pub mod model;
pub mod synth;
pub mod taxonomy;
pub mod viz;

pub use error::{Error, Result};
