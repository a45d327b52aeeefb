//! Reference minimizer for tiny instances.
//!
//! The absolute values are lifted into epigraph variables, which turns the
//! objective into `cᵀx - Σ z ln(aᵀx)` under homogeneous linear constraints
//! `Cx >= 0`. That problem is solved by a primal log-barrier method with
//! dense damped Newton steps. Nothing here is shared with the primal-dual
//! solver or with the objective code in `model`.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Hyperparameters, Observations};
use crate::operators::EpiGraph;

use super::OracleSolution;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleBudget {
    /// Total Newton steps across all barrier stages.
    pub max_newton_steps: usize,
    /// Stop once the barrier's duality-gap bound `m / t` is below this.
    pub gap_tolerance: f64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget { max_newton_steps: 5_000, gap_tolerance: 1e-11 }
    }
}

type Row = Vec<(usize, f64)>;

const MAX_CENTERING_STEPS: usize = 60;
const CENTERING_TOLERANCE: f64 = 1e-14;

struct Program {
    num_vars: usize,
    /// Linear cost.
    cost: Vec<f64>,
    /// `(z, a)` pairs contributing `-z ln(aᵀx)`.
    logs: Vec<(f64, Row)>,
    /// Rows of `C` in `Cx >= 0`.
    constraints: Vec<Row>,
    constant: f64,
}

fn dot(row: &Row, x: &DVector<f64>) -> f64 {
    row.iter().map(|&(i, c)| c * x[i]).sum()
}

impl Program {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let mut v = self.constant + self.cost.iter().zip(x.iter()).map(|(c, x)| c * x).sum::<f64>();
        for (z, a) in &self.logs {
            v -= z * dot(a, x).ln();
        }
        v
    }

    fn strictly_feasible(&self, x: &DVector<f64>) -> bool {
        self.constraints.iter().all(|c| dot(c, x) > 0.0) && self.logs.iter().all(|(_, a)| dot(a, x) > 0.0)
    }

    fn newton_system(&self, x: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.num_vars;
        let mut grad = DVector::from_iterator(n, self.cost.iter().map(|c| t * c));
        let mut hess = DMatrix::zeros(n, n);
        let mut add = |row: &Row, g: f64, h: f64, grad: &mut DVector<f64>| {
            for &(i, ci) in row {
                grad[i] += g * ci;
                for &(j, cj) in row {
                    hess[(i, j)] += h * ci * cj;
                }
            }
        };
        for (z, a) in &self.logs {
            let p = dot(a, x);
            add(a, -t * z / p, t * z / (p * p), &mut grad);
        }
        for c in &self.constraints {
            let s = dot(c, x);
            add(c, -1.0 / s, 1.0 / (s * s), &mut grad);
        }
        (grad, hess)
    }
}

fn solve_spd(hess: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = hess.clone().cholesky() {
        return Some(chol.solve(rhs));
    }
    let scale = hess.diagonal().amax().max(1.0);
    let mut shifted = hess.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += 1e-14 * scale;
    }
    match shifted.cholesky() {
        Some(chol) => Some(chol.solve(rhs)),
        None => hess.lu().solve(rhs),
    }
}

/// Indices of the lifted problem.
struct Layout {
    rows: usize,
    days: usize,
    r: Vec<Option<usize>>,
    o: Vec<Option<usize>>,
    u: Vec<usize>,
    v: Vec<usize>,
    w: Vec<(usize, usize)>,
}

/// Minimize the penalized objective of a small instance to high accuracy.
///
/// Where `Z = ΦZ = 0` the pair is fixed at `(0, 0)`; with `λ_O = +∞`, `O` is
/// fixed at 0 wherever `ΦZ > 0`.
pub fn oracle_solve(
    obs: &Observations,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
    budget: &OracleBudget,
) -> Result<OracleSolution> {
    let (rows, days) = obs.dim();
    if days < 3 {
        return Err(Error::Shape(format!("need at least 3 days, got {days}")));
    }
    if graph.num_vertices() != rows {
        return Err(Error::Graph("graph does not match the territories".into()));
    }
    if !(budget.gap_tolerance > 0.0) || budget.max_newton_steps == 0 {
        return Err(Error::Parameter("oracle budget must be positive".into()));
    }
    let z = obs.counts();
    let phiz = obs.phi_z();
    let pinned = hyper.outliers_pinned();
    let n = rows * days;
    let flat = |d: usize, t: usize| d * days + t;

    let mut next = 0;
    let mut alloc = || {
        next += 1;
        next - 1
    };
    let mut layout =
        Layout { rows, days, r: vec![None; n], o: vec![None; n], u: Vec::new(), v: Vec::new(), w: Vec::new() };
    for d in 0..rows {
        for t in 0..days {
            let i = flat(d, t);
            let silent = z[[d, t]] == 0.0 && phiz[[d, t]] == 0.0;
            if silent {
                continue;
            }
            layout.r[i] = Some(alloc());
            if !(pinned && phiz[[d, t]] > 0.0) {
                layout.o[i] = Some(alloc());
            }
        }
    }
    let lifted_d2 = hyper.lambda_t > 0.0;
    if lifted_d2 {
        layout.u = (0..rows * (days - 2)).map(|_| alloc()).collect();
    }
    let lifted_g = hyper.lambda_s > 0.0 && graph.num_edges() > 0;
    if lifted_g {
        layout.v = (0..graph.num_edges() * days).map(|_| alloc()).collect();
    }
    if !pinned && hyper.lambda_o > 0.0 {
        for i in 0..n {
            if let Some(oi) = layout.o[i] {
                layout.w.push((oi, alloc()));
            }
        }
    }
    let num_vars = next;

    let mut cost = vec![0.0; num_vars];
    let mut logs = Vec::new();
    let mut constraints = Vec::new();
    let mut constant = 0.0;
    for d in 0..rows {
        for t in 0..days {
            let i = flat(d, t);
            let Some(ri) = layout.r[i] else { continue };
            let mut a: Row = Vec::new();
            if phiz[[d, t]] > 0.0 {
                a.push((ri, phiz[[d, t]]));
            }
            if let Some(oi) = layout.o[i] {
                a.push((oi, 1.0));
            }
            for &(j, c) in &a {
                cost[j] += c;
            }
            let zz = z[[d, t]];
            if zz > 0.0 {
                constant += zz * zz.ln() - zz;
                logs.push((zz, a.clone()));
            }
            constraints.push(vec![(ri, 1.0)]);
            constraints.push(a);
        }
    }
    // a penalized variable x enters through s >= |x|, written as s - x >= 0, s + x >= 0
    let mut lift = |target: usize, terms: Row, weight: f64, cost: &mut Vec<f64>| {
        cost[target] += weight;
        let mut plus = vec![(target, 1.0)];
        let mut minus = vec![(target, 1.0)];
        for (j, c) in terms {
            plus.push((j, c));
            minus.push((j, -c));
        }
        constraints.push(plus);
        constraints.push(minus);
    };
    let r_term = |d: usize, t: usize, c: f64| layout.r[flat(d, t)].map(|j| (j, c));
    if lifted_d2 {
        for d in 0..rows {
            for j in 0..days - 2 {
                let terms: Row =
                    [r_term(d, j, 0.5), r_term(d, j + 1, -1.0), r_term(d, j + 2, 0.5)].into_iter().flatten().collect();
                lift(layout.u[d * (days - 2) + j], terms, hyper.lambda_t, &mut cost);
            }
        }
    }
    if lifted_g {
        for (e, &(a, b)) in graph.edges().iter().enumerate() {
            for t in 0..days {
                let terms: Row = [r_term(a, t, 1.0), r_term(b, t, -1.0)].into_iter().flatten().collect();
                lift(layout.v[e * days + t], terms, hyper.lambda_s, &mut cost);
            }
        }
    }
    for &(oi, wi) in &layout.w {
        lift(wi, vec![(oi, 1.0)], hyper.lambda_o, &mut cost);
    }

    let program = Program { num_vars, cost, logs, constraints, constant };
    let mut x = initial_point(&layout, &program, obs);
    if !program.strictly_feasible(&x) {
        return Err(Error::Data("could not build a strictly feasible starting point".into()));
    }

    // t·z >= 1 on every log term keeps the barrier self-concordant, so damped
    // Newton steps need no function-value comparisons
    let min_z = program.logs.iter().map(|(z, _)| *z).fold(f64::INFINITY, f64::min);
    let m = program.constraints.len() as f64;
    let mut t = if min_z.is_finite() { (1.0 / min_z).max(1.0) } else { 1.0 };
    let mut steps = 0;
    'outer: loop {
        for _ in 0..MAX_CENTERING_STEPS {
            if steps >= budget.max_newton_steps {
                break 'outer;
            }
            let (grad, hess) = program.newton_system(&x, t);
            let Some(dx) = solve_spd(hess, &(-&grad)) else { break 'outer };
            let decrement = -grad.dot(&dx);
            steps += 1;
            if !(decrement > CENTERING_TOLERANCE) {
                break;
            }
            let lambda = decrement.sqrt();
            let mut alpha = if lambda < 0.25 { 1.0 } else { 1.0 / (1.0 + lambda) };
            let mut trial = &x + alpha * &dx;
            while !program.strictly_feasible(&trial) {
                alpha *= 0.5;
                if alpha < 1e-14 {
                    break 'outer;
                }
                trial = &x + alpha * &dx;
            }
            x = trial;
        }
        if m / t < budget.gap_tolerance {
            break;
        }
        t *= 8.0;
    }

    Ok(extract(&layout, &program, x, obs, graph, steps))
}

fn initial_point(layout: &Layout, program: &Program, obs: &Observations) -> DVector<f64> {
    let mut x = DVector::zeros(program.num_vars);
    let z = obs.counts();
    for i in 0..layout.rows * layout.days {
        if let Some(ri) = layout.r[i] {
            x[ri] = 1.0;
        }
        if let Some(oi) = layout.o[i] {
            let (d, t) = (i / layout.days, i % layout.days);
            // uncoupled entries need O > 0 to explain the count
            x[oi] = if obs.phi_z()[[d, t]] > 0.0 { 0.0 } else { z[[d, t]].max(1.0) };
        }
    }
    let mut lifted = vec![false; program.num_vars];
    for &i in layout.u.iter().chain(&layout.v).chain(layout.w.iter().map(|(_, w)| w)) {
        lifted[i] = true;
    }
    // each lifted variable sits just above the absolute value it bounds
    for c in &program.constraints {
        if let [(target, 1.0), rest @ ..] = c.as_slice() {
            if !lifted[*target] {
                continue;
            }
            let inner: f64 = rest.iter().map(|&(j, cj)| cj * x[j]).sum();
            x[*target] = x[*target].max(inner.abs() + 1.0);
        }
    }
    x
}

fn extract(
    layout: &Layout,
    program: &Program,
    mut x: DVector<f64>,
    obs: &Observations,
    graph: &EpiGraph,
    steps: usize,
) -> OracleSolution {
    let (rows, days) = (layout.rows, layout.days);
    let mut r = Array2::zeros((rows, days));
    let mut o = Array2::zeros((rows, days));
    for d in 0..rows {
        for t in 0..days {
            let i = d * days + t;
            if let Some(ri) = layout.r[i] {
                r[[d, t]] = x[ri];
            }
            if let Some(oi) = layout.o[i] {
                o[[d, t]] = x[oi];
            }
        }
    }
    // tighten the epigraph variables onto the absolute values they bound
    if !layout.u.is_empty() {
        for d in 0..rows {
            for j in 0..days - 2 {
                x[layout.u[d * (days - 2) + j]] = (0.5 * r[[d, j]] - r[[d, j + 1]] + 0.5 * r[[d, j + 2]]).abs();
            }
        }
    }
    if !layout.v.is_empty() {
        for (e, &(a, b)) in graph.edges().iter().enumerate() {
            for t in 0..days {
                x[layout.v[e * days + t]] = (r[[a, t]] - r[[b, t]]).abs();
            }
        }
    }
    for &(oi, wi) in &layout.w {
        x[wi] = x[oi].abs();
    }
    let objective = program.value(&x);
    let p = &r * &obs.phi_z() + &o;
    OracleSolution { r, o, p, objective, iterations: steps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn silent_instance_has_zero_objective() {
        let obs = Observations::from_parts(Array2::zeros((1, 6)), Array2::zeros((1, 6))).unwrap();
        let sol = oracle_solve(&obs, &EpiGraph::empty(1), &Hyperparameters::per_territory(), &OracleBudget::default())
            .unwrap();
        assert_eq!(sol.objective, 0.0);
        assert!(sol.r.iter().chain(sol.o.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn constant_ratio_is_recovered() {
        let phiz = array![[1.0, 2.0, 1.5, 1.0, 0.5]];
        let obs = Observations::from_parts(&phiz * 2.0, phiz).unwrap();
        let sol = oracle_solve(&obs, &EpiGraph::empty(1), &Hyperparameters::per_territory(), &OracleBudget::default())
            .unwrap();
        assert!(sol.objective.abs() < 1e-9, "{}", sol.objective);
        assert!(sol.r.iter().all(|v| (v - 2.0).abs() < 1e-6), "{:?}", sol.r);
        assert!(sol.o.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn fidelity_only_minimum_is_the_data() {
        // without penalties and with O pinned, p = ΦZ r matches Z exactly
        let phiz = array![[1.0, 2.0, 4.0], [3.0, 1.0, 0.5]];
        let z = array![[2.0, 1.0, 0.0], [6.0, 5.0, 1.0]];
        let obs = Observations::from_parts(z.clone(), phiz).unwrap();
        let h = Hyperparameters::new(0.0, 0.0, f64::INFINITY).unwrap();
        let sol = oracle_solve(&obs, &EpiGraph::empty(2), &h, &OracleBudget::default()).unwrap();
        assert!(sol.objective.abs() < 1e-9);
        for (p, z) in sol.p.iter().zip(z.iter()) {
            assert!((p - z).abs() < 1e-6, "{p} vs {z}");
        }
    }
}
