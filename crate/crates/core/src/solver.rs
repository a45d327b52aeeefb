//! Chambolle-Pock primal-dual iteration for the penalized KL functional.
//!
//! Primal variables `(R, O)` are stored side by side in one `D x 2T` array and
//! the territory-indexed dual blocks `(Q1, Q2, Q4)` in one `D x (3T - 2)`
//! array, so every per-iteration kernel is a loop over independent rows.
//! Rows are dispatched through [`crate::par`]; each row is computed
//! sequentially, which keeps iterates bit-identical across execution policies.

use std::collections::VecDeque;
use std::io::Write;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fidelity_entry, objective, CountMatrix, Estimate, Hyperparameters, Observations};
use crate::operators::{graph_norm_sq, op_norm_bound, prox_f, prox_f_pinned, EpiGraph, D2_NORM_SQ_BOUND};
use crate::par::{self, Execution};
use crate::serial_interval::SerialInterval;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop once the smoothed relative increment falls below this.
    pub epsilon: f64,
    pub k_max: usize,
    /// Length of the sliding window of the smoothed increment.
    pub k_smooth: usize,
    /// Fraction of the step-size bound actually used, in (0, 1).
    pub step_safety: f64,
    /// Evaluate the objective every `trace_every` iterations.
    pub trace_every: usize,
    /// Upper bound on `||D2||_op²` used for the step sizes.
    pub d2_norm_sq: f64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 1e-7,
            k_max: 200_000,
            k_smooth: 500,
            step_safety: 0.99,
            trace_every: 1,
            d2_norm_sq: D2_NORM_SQ_BOUND,
            execution: Execution::default(),
        }
    }
}

impl SolverConfig {
    /// Iteration budget used for the published country and county runs.
    pub fn long_run() -> Self {
        SolverConfig { k_max: 10_000_000, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.k_max == 0 || self.k_smooth == 0 || self.trace_every == 0 {
            return Err(Error::Parameter("k_max, k_smooth and trace_every must be at least 1".into()));
        }
        if !(self.step_safety > 0.0 && self.step_safety < 1.0) {
            return Err(Error::Parameter(format!("step safety must lie in (0, 1), got {}", self.step_safety)));
        }
        if !(self.d2_norm_sq >= 0.0 && self.d2_norm_sq.is_finite()) {
            return Err(Error::Parameter("d2_norm_sq must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Equal primal and dual steps `τ = σ = safety / sqrt(bound)` saturating
/// `τσ ||L||² < 1` with the operator-norm bound.
pub fn step_sizes(hyper: &Hyperparameters, d2_norm_sq: f64, g_norm_sq: f64, safety: f64) -> Result<(f64, f64)> {
    if !(safety > 0.0 && safety < 1.0) {
        return Err(Error::Parameter(format!("step safety must lie in (0, 1), got {safety}")));
    }
    let bound = op_norm_bound(hyper, d2_norm_sq, g_norm_sq);
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::Parameter(format!("operator norm bound must be positive and finite, got {bound}")));
    }
    let step = safety / bound.sqrt();
    Ok((step, step))
}

/// `|Φ_k - Φ_{k-1}| / Φ_{k-1}`, with `0/0 = 0` and `x/0 = +∞`.
pub fn relative_increment(previous: f64, current: f64) -> f64 {
    if previous == 0.0 {
        if current == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        let v = (current - previous).abs() / previous.abs();
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Smoothed increment at iteration `k`: the maximum of the raw increments
/// `Ψ_ℓ` for `ℓ` in `[max(k - k_smooth, 1), k]`. `trace[ℓ]` holds `Φ_ℓ`.
pub fn smoothed_increment(trace: &[f64], k: usize, k_smooth: usize) -> f64 {
    assert!(k >= 1 && k < trace.len(), "need Φ_0..=Φ_k");
    let lo = k.saturating_sub(k_smooth).max(1);
    (lo..=k).map(|l| relative_increment(trace[l - 1], trace[l])).fold(0.0, f64::max)
}

/// Running maximum over the last `len` values.
struct SlidingMax {
    len: usize,
    items: VecDeque<(usize, f64)>,
}

impl SlidingMax {
    fn new(len: usize) -> Self {
        SlidingMax { len, items: VecDeque::new() }
    }

    fn push(&mut self, index: usize, value: f64) -> f64 {
        while self.items.back().is_some_and(|&(_, v)| v <= value) {
            self.items.pop_back();
        }
        self.items.push_back((index, value));
        while self.items.front().is_some_and(|&(i, _)| i + self.len < index) {
            self.items.pop_front();
        }
        self.items.front().map_or(value, |&(_, v)| v)
    }
}

/// Starting point `(R⁰, O⁰)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalPoint {
    pub r: Array2<f64>,
    pub o: Array2<f64>,
}

/// Solve for the counts `z` (used as given; standardize beforehand).
pub fn run(
    z: &CountMatrix,
    phi: &SerialInterval,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
    config: &SolverConfig,
) -> Result<Estimate> {
    let obs = Observations::from_counts(z, phi)?;
    solve(&obs, graph, hyper, config, None)
}

struct Problem<'a> {
    obs: &'a Observations,
    graph: &'a EpiGraph,
    lambda_t: f64,
    lambda_s: f64,
    lambda_o: f64,
    pinned: bool,
    days: usize,
    exec: Execution,
}

impl Problem<'_> {
    fn prox(&self, r: f64, o: f64, z: f64, phiz: f64, tau: f64) -> (f64, f64) {
        if self.pinned {
            prox_f_pinned(r, o, z, phiz, tau)
        } else {
            prox_f(r, o, z, phiz, tau)
        }
    }

    /// Repair entries of a starting point where the data term is infinite.
    fn repair(&self, x: &mut Array2<f64>) {
        let t_len = self.days;
        let (z, pz) = (self.obs.counts(), self.obs.phi_z());
        for (d, mut row) in x.outer_iter_mut().enumerate() {
            for t in 0..t_len {
                let (zz, pp) = (z[[d, t]], pz[[d, t]]);
                if self.pinned && pp > 0.0 {
                    row[t_len + t] = 0.0;
                }
                let (r, o) = (row[t], row[t_len + t]);
                if fidelity_entry(r, o, zz, pp).is_finite() {
                    continue;
                }
                let (r, o) = if zz == 0.0 && pp == 0.0 {
                    (0.0, 0.0)
                } else if pp > 0.0 {
                    (zz / pp, 0.0)
                } else {
                    (0.0, zz)
                };
                row[t] = r;
                row[t_len + t] = o;
            }
        }
    }

    /// `Q = L(x)` in packed layout.
    fn initial_dual(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let t = self.days;
        let rows = x.nrows();
        let mut y = Array2::zeros((rows, 3 * t - 2));
        for (mut yr, xr) in y.outer_iter_mut().zip(x.outer_iter()) {
            for j in 0..t - 2 {
                yr[j] = self.lambda_t * (0.5 * xr[j] - xr[j + 1] + 0.5 * xr[j + 2]);
            }
            for k in 0..t {
                yr[t - 2 + k] = xr[k];
                yr[2 * t - 2 + k] = self.lambda_o * xr[t + k];
            }
        }
        let mut q3 = Array2::zeros((self.graph.num_edges(), t));
        for (mut qr, &(a, b)) in q3.outer_iter_mut().zip(self.graph.edges()) {
            for k in 0..t {
                qr[k] = self.lambda_s * (x[[a, k]] - x[[b, k]]);
            }
        }
        (y, q3)
    }

    /// `Q ← prox_{σH*}(Q + σ L(x̄))`.
    fn dual_step(&self, y: &mut Array2<f64>, q3: &mut Array2<f64>, x_bar: &Array2<f64>, sigma: f64) {
        let t = self.days;
        let (st, so) = (sigma * self.lambda_t, sigma * self.lambda_o);
        par::for_each_row(self.exec, y.view_mut(), |d, mut yr| {
            let xb = x_bar.row(d);
            for j in 0..t - 2 {
                let v = yr[j] + st * (0.5 * xb[j] - xb[j + 1] + 0.5 * xb[j + 2]);
                yr[j] = v.clamp(-1.0, 1.0);
            }
            for k in 0..t {
                yr[t - 2 + k] = (yr[t - 2 + k] + sigma * xb[k]).min(0.0);
            }
            if so != 0.0 {
                for k in 0..t {
                    yr[2 * t - 2 + k] = (yr[2 * t - 2 + k] + so * xb[t + k]).clamp(-1.0, 1.0);
                }
            }
        });
        if self.lambda_s != 0.0 && self.graph.num_edges() > 0 {
            let ss = sigma * self.lambda_s;
            let edges = self.graph.edges();
            par::for_each_row(self.exec, q3.view_mut(), |e, mut qr| {
                let (a, b) = edges[e];
                let (xa, xb) = (x_bar.row(a), x_bar.row(b));
                for k in 0..t {
                    qr[k] = (qr[k] + ss * (xa[k] - xb[k])).clamp(-1.0, 1.0);
                }
            });
        }
    }

    /// `x ← prox_{τF}(x - τ L*Q)` and `x̄ ← 2x - x_old`.
    fn primal_step(&self, x: &mut Array2<f64>, x_bar: &mut Array2<f64>, y: &Array2<f64>, q3: &Array2<f64>, tau: f64) {
        let t = self.days;
        let (z, pz) = (self.obs.counts(), self.obs.phi_z());
        par::for_each_row_pair(self.exec, x.view_mut(), x_bar.view_mut(), |d, mut xr, mut xb| {
            let yr = y.row(d);
            let (q1, q2, q4) = (yr.slice(s![..t - 2]), yr.slice(s![t - 2..2 * t - 2]), yr.slice(s![2 * t - 2..]));
            let incident = self.graph.incident(d);
            for k in 0..t {
                let mut d2_adj = 0.0;
                if k < t - 2 {
                    d2_adj += 0.5 * q1[k];
                }
                if k >= 1 && k <= t - 2 {
                    d2_adj -= q1[k - 1];
                }
                if k >= 2 {
                    d2_adj += 0.5 * q1[k - 2];
                }
                let mut g_adj = 0.0;
                if self.lambda_s != 0.0 {
                    for &(e, sign) in incident {
                        g_adj += sign * q3[[e, k]];
                    }
                }
                let grad_r = self.lambda_t * d2_adj + q2[k] + self.lambda_s * g_adj;
                let grad_o = self.lambda_o * q4[k];
                let (r_old, o_old) = (xr[k], xr[t + k]);
                let (r, o) = self.prox(r_old - tau * grad_r, o_old - tau * grad_o, z[[d, k]], pz[[d, k]], tau);
                xr[k] = r;
                xr[t + k] = o;
                xb[k] = 2.0 * r - r_old;
                xb[t + k] = 2.0 * o - o_old;
            }
        });
    }

    /// Objective along the iterates. Positivity of `R` is reached only in the
    /// limit, so the `ι_{>=0}(R)` term is left out here.
    fn trace_objective(&self, x: &Array2<f64>) -> f64 {
        let t = self.days;
        let (z, pz) = (self.obs.counts(), self.obs.phi_z());
        let rows = par::ordered_sum(self.exec, x.nrows(), 2 * t, |d| {
            let xr = x.row(d);
            let mut acc = 0.0;
            for k in 0..t {
                acc += fidelity_entry(xr[k], xr[t + k], z[[d, k]], pz[[d, k]]);
            }
            let mut tv = 0.0;
            for j in 0..t - 2 {
                tv += (0.5 * xr[j] - xr[j + 1] + 0.5 * xr[j + 2]).abs();
            }
            acc += self.lambda_t * tv;
            if !self.pinned {
                let l1: f64 = (0..t).map(|k| xr[t + k].abs()).sum();
                acc += self.lambda_o * l1;
            }
            acc
        });
        let spatial = if self.lambda_s != 0.0 && self.graph.num_edges() > 0 {
            let edges = self.graph.edges();
            self.lambda_s
                * par::ordered_sum(self.exec, edges.len(), t, |e| {
                    let (a, b) = edges[e];
                    (0..t).map(|k| (x[[a, k]] - x[[b, k]]).abs()).sum::<f64>()
                })
        } else {
            0.0
        };
        rows + spatial
    }
}

fn pack(r: ArrayView2<'_, f64>, o: ArrayView2<'_, f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[r, o]).expect("matching shapes")
}

/// Chambolle-Pock on the prepared observations. `init` defaults to
/// `R⁰ = Z, O⁰ = 0`; any starting entry with an infinite data term is
/// repaired (`R = 0, O = Z` where `ΦZ = 0 < Z`).
pub fn solve(
    obs: &Observations,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
    config: &SolverConfig,
    init: Option<&PrimalPoint>,
) -> Result<Estimate> {
    config.validate()?;
    let (rows, days) = obs.dim();
    if days < 3 {
        return Err(Error::Shape(format!("estimation needs at least 3 days, got {days}")));
    }
    if graph.num_vertices() != rows {
        return Err(Error::Graph(format!("graph has {} vertices for {rows} territories", graph.num_vertices())));
    }
    if !(hyper.lambda_t > 0.0) {
        return Err(Error::Parameter("lambda_t must be positive for estimation".into()));
    }
    let problem = Problem {
        obs,
        graph,
        lambda_t: hyper.lambda_t,
        lambda_s: hyper.lambda_s,
        lambda_o: hyper.outlier_weight(),
        pinned: hyper.outliers_pinned(),
        days,
        exec: config.execution,
    };
    let g_norm_sq = if hyper.lambda_s > 0.0 { graph_norm_sq(graph) } else { 0.0 };
    let (tau, sigma) = step_sizes(hyper, config.d2_norm_sq, g_norm_sq, config.step_safety)?;

    let mut x = match init {
        Some(p) => {
            if p.r.dim() != (rows, days) || p.o.dim() != (rows, days) {
                return Err(Error::Shape("initial point does not match the data".into()));
            }
            pack(p.r.view(), p.o.view())
        }
        None => pack(obs.counts(), Array2::zeros((rows, days)).view()),
    };
    let mut phi_prev = problem.trace_objective(&x);
    if !phi_prev.is_finite() {
        problem.repair(&mut x);
        phi_prev = problem.trace_objective(&x);
        if !phi_prev.is_finite() {
            return Err(Error::Data("objective is not finite at the initial point".into()));
        }
    }
    let (mut y, mut q3) = problem.initial_dual(&x);
    let mut x_bar = x.clone();

    let mut objective_trace = vec![phi_prev];
    let mut increment_trace = Vec::new();
    let mut smoothed_trace = Vec::new();
    let mut trace_iterations = vec![0];
    let mut window = SlidingMax::new(config.k_smooth);
    let mut converged = false;
    let mut k = 0;
    while k < config.k_max {
        problem.dual_step(&mut y, &mut q3, &x_bar, sigma);
        problem.primal_step(&mut x, &mut x_bar, &y, &q3, tau);
        k += 1;
        if k % config.trace_every != 0 && k != config.k_max {
            continue;
        }
        let phi = problem.trace_objective(&x);
        let psi = relative_increment(phi_prev, phi);
        let smoothed = window.push(increment_trace.len(), psi);
        objective_trace.push(phi);
        increment_trace.push(psi);
        smoothed_trace.push(smoothed);
        trace_iterations.push(k);
        phi_prev = phi;
        if smoothed < config.epsilon {
            converged = true;
            break;
        }
    }

    let r = x.slice(s![.., ..days]).to_owned();
    let o = x.slice(s![.., days..]).to_owned();
    finish(obs, graph, hyper, r, o, k, converged, objective_trace, increment_trace, smoothed_trace, trace_iterations)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    obs: &Observations,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
    mut r: Array2<f64>,
    mut o: Array2<f64>,
    iterations: usize,
    converged: bool,
    objective_trace: Vec<f64>,
    increment_trace: Vec<f64>,
    smoothed_trace: Vec<f64>,
    trace_iterations: Vec<usize>,
) -> Result<Estimate> {
    let min_r = r.iter().copied().fold(0.0, f64::min);
    let mut projected = 0;
    let (z, pz) = (obs.counts(), obs.phi_z());
    let mut p_hat = Array2::zeros(r.dim());
    for ((d, t), p) in p_hat.indexed_iter_mut() {
        let (r0, o0) = (r[[d, t]], o[[d, t]]);
        let (mut rv, mut ov) = (r0.max(0.0), o0);
        if z[[d, t]] == 0.0 && pz[[d, t]] == 0.0 {
            rv = 0.0;
            ov = 0.0;
        }
        if rv * pz[[d, t]] + ov < 0.0 {
            ov = -rv * pz[[d, t]];
        }
        if rv != r0 || ov != o0 {
            projected += 1;
        }
        r[[d, t]] = rv;
        o[[d, t]] = ov;
        *p = (rv * pz[[d, t]] + ov).max(0.0);
    }
    let objective = objective(r.view(), o.view(), obs, graph, hyper)?;
    Ok(Estimate {
        r_hat: r,
        o_hat: o,
        p_hat,
        iterations,
        objective,
        objective_trace,
        increment_trace,
        smoothed_trace,
        trace_iterations,
        converged,
        min_r_before_projection: min_r,
        projected_entries: projected,
    })
}

/// Iteration log with columns
/// `run,iteration,objective,increment,smoothed_increment`, one block per
/// labelled run. The increments are empty on the initial row.
pub fn write_trace_csv<W: Write>(mut out: W, runs: &[(&str, &Estimate)]) -> std::io::Result<()> {
    writeln!(out, "run,iteration,objective,increment,smoothed_increment")?;
    for (label, est) in runs {
        writeln!(out, "{label},{},{},,", est.trace_iterations[0], est.objective_trace[0])?;
        for i in 0..est.increment_trace.len() {
            writeln!(
                out,
                "{label},{},{},{},{}",
                est.trace_iterations[i + 1],
                est.objective_trace[i + 1],
                est.increment_trace[i],
                est.smoothed_trace[i]
            )?;
        }
    }
    Ok(())
}

/// `P = R ⊙ ΦZ + O` for an arbitrary point.
pub fn intensity(r: ArrayView2<'_, f64>, o: ArrayView2<'_, f64>, obs: &Observations) -> Array2<f64> {
    let mut p = r.to_owned() * obs.phi_z();
    p += &o;
    p
}
