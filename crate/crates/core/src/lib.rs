//! Remaining-useful-life estimation for the C-MAPSS turbofan benchmark.
//!
//! The pipeline runs from raw text files to evaluation reports:
//! [`ingest`] parses and normalizes trajectories, [`windowing`] builds capped
//! RUL targets and sliding windows, [`models`] holds the baselines and the
//! multi-block interaction models, [`training`] runs the cross-validated
//! training protocol, and [`evaluation`] produces test metrics, ablations and
//! smoothed prediction curves.

pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod plot;
pub mod reference;
pub mod synthetic;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
