//! Robust estimation of the time-varying reproduction number from daily
//! infection counts, with outlier absorption and optional spatial coupling
//! through a territory adjacency graph.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod epidata;
pub mod error;
pub mod model;
pub mod operators;
pub mod par;
pub mod pipeline;
pub mod serial_interval;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use model::{CountMatrix, Estimate, Hyperparameters, Observations};
pub use operators::EpiGraph;
pub use par::Execution;
pub use pipeline::{estimate_counts, two_step, PipelineResult};
pub use serial_interval::SerialInterval;
pub use solver::SolverConfig;
