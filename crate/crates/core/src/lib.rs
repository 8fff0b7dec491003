//! Crossover reader-study toolkit for AI-assisted AMD severity grading.

pub mod design;
pub mod error;
pub mod grading;
pub mod predictor;
pub mod report;
pub mod rng;
pub mod severity;
pub mod simulation;
pub mod stats;

pub use error::{Error, Result};

