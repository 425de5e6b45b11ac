//! Benchmark harness around `rmha-core`: file formats, seeded instances,
//! metrics, evaluation campaigns, plots and training drivers. The `rmha`
//! binary exposes them on the command line.

pub mod campaign;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod instance;
pub mod metrics;
pub mod movingai;
pub mod plot;
pub mod solution;
pub mod solver;
pub mod trace;
pub mod training;

pub use error::{BenchError, Result};
