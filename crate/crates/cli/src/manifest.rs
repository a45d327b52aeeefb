//! Run manifest written next to every output set.

use serde::{Deserialize, Serialize};

use epirt::pipeline::PipelineResult;
use epirt::{Hyperparameters, SerialInterval, SolverConfig};

use crate::Command;

#[derive(Serialize, Deserialize)]
pub struct SerialIntervalInfo {
    pub shape: f64,
    pub rate: f64,
    pub tau: usize,
    pub mean: f64,
    pub std_dev: f64,
}

impl From<&SerialInterval> for SerialIntervalInfo {
    fn from(phi: &SerialInterval) -> Self {
        SerialIntervalInfo {
            shape: phi.shape(),
            rate: phi.rate(),
            tau: phi.tau(),
            mean: phi.mean(),
            std_dev: phi.std_dev(),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct RunResult {
    pub iterations: usize,
    pub converged: bool,
    /// Sum of the standardized objectives.
    pub objective: f64,
    /// Independent solves (one per territory when uncoupled).
    pub runs: usize,
}

impl From<&PipelineResult> for RunResult {
    fn from(r: &PipelineResult) -> Self {
        RunResult { iterations: r.iterations(), converged: r.converged(), objective: r.objective(), runs: r.runs.len() }
    }
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub inputs: serde_json::Value,
    /// Every argument of the run, defaults included; `replay` re-executes it.
    pub invocation: Command,
    pub hyper: Option<Hyperparameters>,
    pub solver: Option<SolverConfig>,
    pub serial_interval: Option<SerialIntervalInfo>,
    pub territories: Option<usize>,
    pub edges: Option<usize>,
    pub result: Option<RunResult>,
    pub outputs: Vec<String>,
    pub wall_time_seconds: f64,
}

impl Manifest {
    pub fn new(command: &Command) -> Self {
        Manifest {
            command: command.name().into(),
            version: format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("EPIRT_GIT_DESCRIBE")),
            inputs: command.inputs(),
            invocation: command.clone(),
            hyper: None,
            solver: None,
            serial_interval: None,
            territories: None,
            edges: None,
            result: None,
            outputs: Vec::new(),
            wall_time_seconds: 0.0,
        }
    }
}
