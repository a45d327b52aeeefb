//! End-to-end estimation in count units: standardize each territory, solve,
//! and express the outliers and intensities back in counts.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{sliding_median_baseline, standardize, CountMatrix, Estimate, Hyperparameters, Observations};
use crate::operators::EpiGraph;
use crate::par;
use crate::serial_interval::SerialInterval;
use crate::solver::{self, SolverConfig};

pub const BASELINE_WINDOW: usize = 7;
pub const BASELINE_THRESHOLD: f64 = 2.5;

/// Estimate in count units, plus the solver runs that produced it.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    /// Scale-free reproduction numbers.
    pub r_hat: Array2<f64>,
    /// Outliers in count units.
    pub o_hat: Array2<f64>,
    /// Denoised intensities in count units.
    pub p_hat: Array2<f64>,
    /// Per-territory standardization factors.
    pub alpha: Vec<f64>,
    /// One run for a joint solve, or one per territory when uncoupled. Each
    /// is in standardized units.
    pub runs: Vec<Estimate>,
}

impl PipelineResult {
    pub fn converged(&self) -> bool {
        self.runs.iter().all(|r| r.converged)
    }

    /// Largest iteration count over the runs.
    pub fn iterations(&self) -> usize {
        self.runs.iter().map(|r| r.iterations).max().unwrap_or(0)
    }

    /// Sum of the standardized objectives.
    pub fn objective(&self) -> f64 {
        self.runs.iter().map(|r| r.objective).sum()
    }
}

/// Standardize, solve and rescale. Without graph edges (or with
/// `λ_S = 0`) every territory is solved on its own, in parallel under
/// [`par::Execution::Parallel`].
pub fn estimate_counts(
    z: &CountMatrix,
    phi: &SerialInterval,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
    config: &SolverConfig,
) -> Result<PipelineResult> {
    if graph.num_vertices() != z.num_territories() {
        return Err(Error::Graph(format!(
            "graph has {} vertices for {} territories",
            graph.num_vertices(),
            z.num_territories()
        )));
    }
    let (scaled, alpha) = standardize(z);
    let obs = Observations::from_counts(&scaled, phi)?;
    let coupled = hyper.lambda_s > 0.0 && graph.num_edges() > 0;
    let runs = if coupled || z.num_territories() == 1 {
        vec![solver::solve(&obs, graph, hyper, config, None)?]
    } else {
        let single = EpiGraph::empty(1);
        let results = par::map_indices(config.execution, z.num_territories(), |d| {
            let row = |a: &Array2<f64>| a.select(Axis(0), &[d]);
            let obs_d = Observations::from_parts(row(&obs.counts().to_owned()), row(&obs.phi_z().to_owned()))?;
            solver::solve(&obs_d, &single, hyper, config, None)
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };

    let stack = |pick: fn(&Estimate) -> &Array2<f64>| -> Array2<f64> {
        let views: Vec<_> = runs.iter().map(|r| pick(r).view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("runs cover the rows")
    };
    let r_hat = stack(|e| &e.r_hat);
    let mut o_hat = stack(|e| &e.o_hat);
    let mut p_hat = stack(|e| &e.p_hat);
    for (d, &a) in alpha.iter().enumerate() {
        o_hat.row_mut(d).mapv_inplace(|v| v * a);
        p_hat.row_mut(d).mapv_inplace(|v| v * a);
    }
    Ok(PipelineResult { r_hat, o_hat, p_hat, alpha, runs })
}

/// Two-step baseline: sliding-median cleaning, then estimation without an
/// outlier term on the cleaned counts.
#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub cleaned: CountMatrix,
    /// `Z - Z_clean`, nonzero where a sample was replaced.
    pub removed: Array2<f64>,
    pub estimate: PipelineResult,
}

pub fn two_step(
    z: &CountMatrix,
    phi: &SerialInterval,
    hyper: &Hyperparameters,
    config: &SolverConfig,
    window: usize,
    threshold: f64,
) -> Result<TwoStepResult> {
    let (cleaned, removed) = sliding_median_baseline(z, window, threshold)?;
    let graph = EpiGraph::empty(z.num_territories());
    let estimate = estimate_counts(&cleaned, phi, &graph, hyper, config)?;
    Ok(TwoStepResult { cleaned, removed, estimate })
}
