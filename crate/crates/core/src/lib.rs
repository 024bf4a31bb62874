//! Risk-controlled concept annotation for concept-bottleneck models.
//!
//! The pipeline ingests precomputed image/text embeddings and detector
//! outputs, calibrates a confidence threshold with conformal risk control
//! over discriminability, coverage and diversity losses, builds concept
//! labels (augmenting sparse concepts by copy-paste), trains a linear
//! concept bottleneck and scores it with concept-compliance metrics.

pub mod calibration;
pub mod cbm;
pub mod concept_sets;
pub mod dataset;
pub mod evaluation;
pub mod io;
pub mod pipeline;
pub mod error;
pub mod similarity;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
