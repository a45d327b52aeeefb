//! Projected subgradient descent with normalized steps, restarted from the
//! best point with geometrically shrinking step lengths. Slow and only
//! loosely accurate, but about as simple as a minimizer gets; it shares no
//! code with the primal-dual solver or the objective in `model`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Hyperparameters, Observations};
use crate::operators::EpiGraph;

use super::OracleSolution;

/// Smallest intensity allowed where the count is positive.
const MIN_INTENSITY: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradientBudget {
    pub stages: usize,
    pub iterations_per_stage: usize,
    /// Step length of the first stage (inputs are assumed standardized).
    pub initial_step: f64,
    /// Step length ratio between consecutive stages.
    pub decay: f64,
}

impl Default for SubgradientBudget {
    fn default() -> Self {
        SubgradientBudget { stages: 40, iterations_per_stage: 25_000, initial_step: 0.5, decay: 0.7 }
    }
}

impl SubgradientBudget {
    pub fn total_iterations(&self) -> usize {
        self.stages * self.iterations_per_stage
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Entry {
    /// `Z = ΦZ = 0`: pinned at `(0, 0)`.
    Silent,
    /// `ΦZ > 0`.
    Coupled,
    /// `ΦZ = 0 < Z`: only `O` can explain the count.
    Uncoupled,
}

struct Instance<'a> {
    z: Vec<f64>,
    phiz: Vec<f64>,
    kind: Vec<Entry>,
    days: usize,
    edges: &'a [(usize, usize)],
    lt: f64,
    ls: f64,
    lo: f64,
    /// `λ_O = +∞`: `O` is fixed at 0 wherever `ΦZ > 0`.
    pinned: bool,
}

impl Instance<'_> {
    fn value(&self, r: &[f64], o: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..r.len() {
            if self.kind[i] == Entry::Silent {
                continue;
            }
            let p = r[i] * self.phiz[i] + o[i];
            let z = self.z[i];
            total += if z > 0.0 { z * (z / p).ln() + p - z } else { p };
        }
        let t_len = self.days;
        for row in r.chunks(t_len) {
            for t in 0..t_len - 2 {
                total += self.lt * (0.5 * row[t] - row[t + 1] + 0.5 * row[t + 2]).abs();
            }
        }
        for &(a, b) in self.edges {
            for t in 0..t_len {
                total += self.ls * (r[a * t_len + t] - r[b * t_len + t]).abs();
            }
        }
        if !self.pinned {
            total += self.lo * o.iter().map(|v| v.abs()).sum::<f64>();
        }
        total
    }

    fn subgradient(&self, r: &[f64], o: &[f64], gr: &mut [f64], go: &mut [f64]) {
        gr.fill(0.0);
        go.fill(0.0);
        for i in 0..r.len() {
            if self.kind[i] == Entry::Silent {
                continue;
            }
            let p = r[i] * self.phiz[i] + o[i];
            let dp = if self.z[i] > 0.0 { 1.0 - self.z[i] / p } else { 1.0 };
            gr[i] += dp * self.phiz[i];
            go[i] += dp;
            if !self.pinned {
                go[i] += self.lo * sign(o[i]);
            }
        }
        let t_len = self.days;
        for d in 0..r.len() / t_len {
            let base = d * t_len;
            for t in 0..t_len - 2 {
                let s = self.lt * sign(0.5 * r[base + t] - r[base + t + 1] + 0.5 * r[base + t + 2]);
                gr[base + t] += 0.5 * s;
                gr[base + t + 1] -= s;
                gr[base + t + 2] += 0.5 * s;
            }
        }
        for &(a, b) in self.edges {
            for t in 0..t_len {
                let (ia, ib) = (a * t_len + t, b * t_len + t);
                let s = self.ls * sign(r[ia] - r[ib]);
                gr[ia] += s;
                gr[ib] -= s;
            }
        }
        for i in 0..r.len() {
            match self.kind[i] {
                Entry::Silent => {
                    gr[i] = 0.0;
                    go[i] = 0.0;
                }
                Entry::Coupled if self.pinned => go[i] = 0.0,
                _ => {}
            }
        }
    }

    /// Euclidean projection of each `(r, o)` pair onto its feasible set.
    fn project(&self, r: &mut [f64], o: &mut [f64]) {
        for i in 0..r.len() {
            let floor = if self.z[i] > 0.0 { MIN_INTENSITY } else { 0.0 };
            match self.kind[i] {
                Entry::Silent => {
                    r[i] = 0.0;
                    o[i] = 0.0;
                }
                Entry::Uncoupled => {
                    r[i] = r[i].max(0.0);
                    o[i] = o[i].max(floor);
                }
                Entry::Coupled if self.pinned => {
                    r[i] = r[i].max(floor / self.phiz[i]);
                    o[i] = 0.0;
                }
                Entry::Coupled => {
                    let (pr, po) = project_pair(r[i], o[i], self.phiz[i], floor);
                    r[i] = pr;
                    o[i] = po;
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Nearest point of `{r >= 0, r φ + o >= floor}` to `(r0, o0)`, with `φ > 0`.
fn project_pair(r0: f64, o0: f64, phi: f64, floor: f64) -> (f64, f64) {
    let feasible = |r: f64, o: f64| r >= 0.0 && r * phi + o >= floor * (1.0 - 1e-12);
    if feasible(r0, o0) {
        return (r0, o0);
    }
    let shift = (floor - r0 * phi - o0) / (phi * phi + 1.0);
    let candidates = [(r0.max(0.0), o0), (r0 + shift * phi, o0 + shift), (0.0, floor)];
    candidates
        .into_iter()
        .filter(|&(r, o)| feasible(r, o))
        .min_by(|a, b| {
            let da = (a.0 - r0).powi(2) + (a.1 - o0).powi(2);
            let db = (b.0 - r0).powi(2) + (b.1 - o0).powi(2);
            da.total_cmp(&db)
        })
        .expect("the corner is always feasible")
}

/// Minimize the penalized objective by projected subgradient descent and
/// return the best point visited. Exhausting the budget is the normal way
/// to stop.
pub fn subgradient_solve(
    obs: &Observations,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
    budget: &SubgradientBudget,
) -> Result<OracleSolution> {
    let (rows, days) = obs.dim();
    if days < 3 {
        return Err(Error::Shape(format!("need at least 3 days, got {days}")));
    }
    if graph.num_vertices() != rows {
        return Err(Error::Graph("graph does not match the territories".into()));
    }
    if !(budget.initial_step > 0.0 && budget.decay > 0.0 && budget.decay <= 1.0) {
        return Err(Error::Parameter("oracle steps must be positive and non-increasing".into()));
    }
    let z: Vec<f64> = obs.counts().iter().copied().collect();
    let phiz: Vec<f64> = obs.phi_z().iter().copied().collect();
    let kind = z
        .iter()
        .zip(&phiz)
        .map(|(&zz, &pp)| match (zz > 0.0, pp > 0.0) {
            (false, false) => Entry::Silent,
            (_, true) => Entry::Coupled,
            (true, false) => Entry::Uncoupled,
        })
        .collect();
    let inst = Instance {
        z,
        phiz,
        kind,
        days,
        edges: graph.edges(),
        lt: hyper.lambda_t,
        ls: hyper.lambda_s,
        lo: hyper.lambda_o,
        pinned: hyper.outliers_pinned(),
    };

    let n = rows * days;
    let mut r = vec![1.0; n];
    let mut o: Vec<f64> = (0..n).map(|i| if inst.kind[i] == Entry::Uncoupled { inst.z[i] } else { 0.0 }).collect();
    inst.project(&mut r, &mut o);
    let mut best = (r.clone(), o.clone());
    let mut best_value = inst.value(&r, &o);
    let (mut gr, mut go) = (vec![0.0; n], vec![0.0; n]);
    let mut iterations = 0;
    let mut step = budget.initial_step;
    'stages: for _ in 0..budget.stages {
        r.clone_from(&best.0);
        o.clone_from(&best.1);
        for _ in 0..budget.iterations_per_stage {
            inst.subgradient(&r, &o, &mut gr, &mut go);
            let norm = gr.iter().chain(&go).map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                break 'stages;
            }
            let scale = step / norm;
            for i in 0..n {
                r[i] -= scale * gr[i];
                o[i] -= scale * go[i];
            }
            inst.project(&mut r, &mut o);
            iterations += 1;
            let value = inst.value(&r, &o);
            if value < best_value {
                best_value = value;
                best.0.clone_from(&r);
                best.1.clone_from(&o);
            }
        }
        step *= budget.decay;
    }

    let (r, o) = best;
    let r = Array2::from_shape_vec((rows, days), r).expect("shape");
    let o = Array2::from_shape_vec((rows, days), o).expect("shape");
    let p = &r * &obs.phi_z() + &o;
    Ok(OracleSolution { r, o, p, objective: best_value, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pair_projection_is_nearest_feasible_point() {
        assert_eq!(project_pair(1.0, 1.0, 2.0, 0.0), (1.0, 1.0));
        assert_eq!(project_pair(-1.0, 5.0, 2.0, 0.0), (0.0, 5.0));
        let (r, o) = project_pair(1.0, -4.0, 1.0, 0.0);
        assert!((r - 2.5).abs() < 1e-12 && (o + 2.5).abs() < 1e-12);
        assert_eq!(project_pair(-1.0, -1.0, 1.0, 0.0), (0.0, 0.0));
        // brute force over a grid
        for &(r0, o0, phi) in &[(-0.3, 0.2, 0.5), (0.4, -2.0, 3.0), (-2.0, -0.5, 0.1)] {
            let (r, o) = project_pair(r0, o0, phi, 0.0);
            let d = (r - r0).powi(2) + (o - o0).powi(2);
            for i in 0..400 {
                for j in 0..400 {
                    let (gr, go) = (i as f64 * 0.01, -2.0 + j as f64 * 0.01);
                    if gr * phi + go >= 0.0 {
                        assert!((gr - r0).powi(2) + (go - o0).powi(2) >= d - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn silent_instance_has_zero_objective() {
        let obs = Observations::from_parts(Array2::zeros((1, 6)), Array2::zeros((1, 6))).unwrap();
        let h = Hyperparameters::per_territory();
        let budget = SubgradientBudget { stages: 2, iterations_per_stage: 10, ..Default::default() };
        let sol = subgradient_solve(&obs, &EpiGraph::empty(1), &h, &budget).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert!(sol.r.iter().chain(sol.o.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn constant_ratio_is_recovered() {
        // Z = 2 ΦZ: R = 2, O = 0 has zero fidelity and zero penalties.
        let phiz = array![[1.0, 2.0, 1.5, 1.0, 0.5]];
        let obs = Observations::from_parts(&phiz * 2.0, phiz).unwrap();
        let budget = SubgradientBudget { stages: 30, iterations_per_stage: 2000, ..Default::default() };
        let sol = subgradient_solve(&obs, &EpiGraph::empty(1), &Hyperparameters::per_territory(), &budget).unwrap();
        assert!(sol.objective < 1e-4, "{}", sol.objective);
        assert!(sol.r.iter().all(|v| (v - 2.0).abs() < 1e-2));
    }
}
