//! Segment-level user interest modeling for short-video recommendation.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod report;
pub mod segrec;
pub mod skip_eval;
pub mod training;

pub use error::{Error, Result};
