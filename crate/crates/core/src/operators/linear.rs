use ndarray::{s, Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EpiGraph;
use crate::error::{Error, Result};
use crate::model::Hyperparameters;

/// `||D2||_op^2 <= (sum of |stencil coefficients|)^2 = 4`.
pub const D2_NORM_SQ_BOUND: f64 = 4.0;

/// Temporal Laplacian: `(D2 R)[d, j] = R[d, j]/2 - R[d, j+1] + R[d, j+2]/2`
/// for `j = 0..T-2`.
pub fn d2_apply(r: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (rows, days) = r.dim();
    if days < 3 {
        return Err(Error::Shape(format!("temporal Laplacian needs T >= 3, got {days}")));
    }
    let mut out = Array2::zeros((rows, days - 2));
    Zip::from(&mut out)
        .and(r.slice(s![.., ..days - 2]))
        .and(r.slice(s![.., 1..days - 1]))
        .and(r.slice(s![.., 2..]))
        .for_each(|o, &a, &b, &c| *o = 0.5 * a - b + 0.5 * c);
    Ok(out)
}

/// Adjoint of [`d2_apply`]: maps `D x (T-2)` back to `D x T`.
pub fn d2_adjoint(q: ArrayView2<'_, f64>, days: usize) -> Result<Array2<f64>> {
    let (rows, inner) = q.dim();
    if days < 3 || inner != days - 2 {
        return Err(Error::Shape(format!(
            "D2 adjoint expects {} columns for T = {days}, got {inner}",
            days.saturating_sub(2)
        )));
    }
    let mut out = Array2::zeros((rows, days));
    for (src, mut dst) in q.outer_iter().zip(out.outer_iter_mut()) {
        for (j, &v) in src.iter().enumerate() {
            dst[j] += 0.5 * v;
            dst[j + 1] -= v;
            dst[j + 2] += 0.5 * v;
        }
    }
    Ok(out)
}

/// Edge differences `(G R)[e, t] = R[d1, t] - R[d2, t]` in stored edge order.
pub fn graph_apply(r: ArrayView2<'_, f64>, graph: &EpiGraph) -> Result<Array2<f64>> {
    let (rows, days) = r.dim();
    if rows != graph.num_vertices() {
        return Err(Error::Graph(format!(
            "graph has {} vertices but the signal has {rows} rows",
            graph.num_vertices()
        )));
    }
    let mut out = Array2::zeros((graph.num_edges(), days));
    for (mut dst, &(a, b)) in out.outer_iter_mut().zip(graph.edges()) {
        Zip::from(&mut dst).and(r.row(a)).and(r.row(b)).for_each(|o, &x, &y| *o = x - y);
    }
    Ok(out)
}

/// Adjoint of [`graph_apply`]: each edge row is added to its first endpoint
/// and subtracted from its second.
pub fn graph_adjoint(q: ArrayView2<'_, f64>, graph: &EpiGraph) -> Result<Array2<f64>> {
    let (edges, days) = q.dim();
    if edges != graph.num_edges() {
        return Err(Error::Graph(format!("graph has {} edges but the dual block has {edges} rows", graph.num_edges())));
    }
    let mut out = Array2::zeros((graph.num_vertices(), days));
    for (v, mut dst) in out.outer_iter_mut().enumerate() {
        for &(e, sign) in graph.incident(v) {
            dst.scaled_add(sign, &q.row(e));
        }
    }
    Ok(out)
}

/// Dual variable living in the codomain of `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVariable {
    /// `D x (T-2)`, temporal block.
    pub q1: Array2<f64>,
    /// `D x T`, positivity block.
    pub q2: Array2<f64>,
    /// `E x T`, spatial block.
    pub q3: Array2<f64>,
    /// `D x T`, outlier block.
    pub q4: Array2<f64>,
}

impl DualVariable {
    pub fn zeros(territories: usize, days: usize, edges: usize) -> Self {
        DualVariable {
            q1: Array2::zeros((territories, days.saturating_sub(2))),
            q2: Array2::zeros((territories, days)),
            q3: Array2::zeros((edges, days)),
            q4: Array2::zeros((territories, days)),
        }
    }

    pub fn inner(&self, other: &DualVariable) -> f64 {
        let dot = |a: &Array2<f64>, b: &Array2<f64>| (a * b).sum();
        dot(&self.q1, &other.q1) + dot(&self.q2, &other.q2) + dot(&self.q3, &other.q3) + dot(&self.q4, &other.q4)
    }

    pub fn norm_sq(&self) -> f64 {
        self.inner(self)
    }

    fn shape_matches(&self, territories: usize, days: usize, edges: usize) -> bool {
        self.q1.dim() == (territories, days - 2)
            && self.q2.dim() == (territories, days)
            && self.q3.dim() == (edges, days)
            && self.q4.dim() == (territories, days)
    }
}

/// `L(R, O) = (λ_T D2 R, R, λ_S G R, λ_O O)`. When outliers are pinned
/// (`λ_O = ∞`) the last block is identically zero.
pub fn l_apply(
    r: ArrayView2<'_, f64>,
    o: ArrayView2<'_, f64>,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
) -> Result<DualVariable> {
    if r.dim() != o.dim() {
        return Err(Error::Shape(format!("R is {:?} but O is {:?}", r.dim(), o.dim())));
    }
    Ok(DualVariable {
        q1: d2_apply(r)? * hyper.lambda_t,
        q2: r.to_owned(),
        q3: graph_apply(r, graph)? * hyper.lambda_s,
        q4: o.to_owned() * hyper.outlier_weight(),
    })
}

/// `L*(Q) = (λ_T D2* Q1 + Q2 + λ_S G* Q3, λ_O Q4)`.
pub fn l_adjoint(q: &DualVariable, graph: &EpiGraph, hyper: &Hyperparameters) -> Result<(Array2<f64>, Array2<f64>)> {
    let (territories, days) = q.q2.dim();
    if days < 3 || !q.shape_matches(territories, days, graph.num_edges()) {
        return Err(Error::Shape("dual variable blocks do not match the codomain of L".into()));
    }
    let mut r = d2_adjoint(q.q1.view(), days)? * hyper.lambda_t;
    r += &q.q2;
    r.scaled_add(hyper.lambda_s, &graph_adjoint(q.q3.view(), graph)?);
    Ok((r, &q.q4 * hyper.outlier_weight()))
}

/// `max{λ_T² ||D2||² + λ_S² ||G||² + 1, λ_O²}`, with `λ_O` taken as zero when
/// outliers are pinned.
pub fn op_norm_bound(hyper: &Hyperparameters, d2_norm_sq: f64, g_norm_sq: f64) -> f64 {
    let lo = hyper.outlier_weight();
    let primal = hyper.lambda_t.powi(2) * d2_norm_sq + hyper.lambda_s.powi(2) * g_norm_sq + 1.0;
    primal.max(lo * lo)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    /// Estimated largest singular value.
    pub singular_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest singular value of `apply` by power iteration on `adjoint ∘ apply`.
/// Stops when the relative change of the eigenvalue estimate drops below
/// `tol`; on `max_iter` the last estimate is returned with `converged = false`.
pub fn power_iteration<A, B>(apply: A, adjoint: B, dim: usize, tol: f64, max_iter: usize) -> PowerIteration
where
    A: Fn(&[f64]) -> Vec<f64>,
    B: Fn(&[f64]) -> Vec<f64>,
{
    assert!(tol > 0.0, "power iteration tolerance must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f1a);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
    let normalize = |v: &mut [f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        n
    };
    normalize(&mut v);
    let mut estimate = 0.0;
    for k in 1..=max_iter {
        let mut w = adjoint(&apply(&v));
        let next = normalize(&mut w);
        if next == 0.0 {
            return PowerIteration { singular_value: 0.0, iterations: k, converged: true };
        }
        v = w;
        let done = (next - estimate).abs() <= tol * next;
        estimate = next;
        if done {
            return PowerIteration { singular_value: estimate.sqrt(), iterations: k, converged: true };
        }
    }
    PowerIteration { singular_value: estimate.sqrt(), iterations: max_iter, converged: false }
}

/// Upper estimate of `||G||_op²`: the power-iteration value inflated by a
/// relative margin of 1e-6, never above the `2 · max degree` bound.
pub fn graph_norm_sq(graph: &EpiGraph) -> f64 {
    if graph.num_edges() == 0 {
        return 0.0;
    }
    let n = graph.num_vertices();
    let apply = |x: &[f64]| {
        let m = ArrayView2::from_shape((n, 1), x).unwrap();
        graph_apply(m, graph).unwrap().into_raw_vec_and_offset().0
    };
    let adjoint = |y: &[f64]| {
        let m = ArrayView2::from_shape((graph.num_edges(), 1), y).unwrap();
        graph_adjoint(m, graph).unwrap().into_raw_vec_and_offset().0
    };
    let est = power_iteration(apply, adjoint, n, 1e-12, 20_000).singular_value.powi(2);
    (est * (1.0 + 1e-6)).min(2.0 * graph.max_degree() as f64)
}

/// Power-iteration estimate of `||L||_op²` for signals of `days` samples.
pub fn l_norm_sq_estimate(
    graph: &EpiGraph,
    hyper: &Hyperparameters,
    days: usize,
    tol: f64,
    max_iter: usize,
) -> PowerIteration {
    let n = graph.num_vertices();
    let block = n * days;
    let edges = graph.num_edges();
    let apply = |x: &[f64]| {
        let r = ArrayView2::from_shape((n, days), &x[..block]).unwrap();
        let o = ArrayView2::from_shape((n, days), &x[block..]).unwrap();
        let q = l_apply(r, o, graph, hyper).unwrap();
        let mut out = Vec::with_capacity(n * (days - 2) + 2 * block + edges * days);
        out.extend(q.q1.iter());
        out.extend(q.q2.iter());
        out.extend(q.q3.iter());
        out.extend(q.q4.iter());
        out
    };
    let adjoint = |y: &[f64]| {
        let mut off = 0;
        let mut take = |rows: usize, cols: usize| {
            let m = ArrayView2::from_shape((rows, cols), &y[off..off + rows * cols]).unwrap().to_owned();
            off += rows * cols;
            m
        };
        let q = DualVariable { q1: take(n, days - 2), q2: take(n, days), q3: take(edges, days), q4: take(n, days) };
        let (r, o) = l_adjoint(&q, graph, hyper).unwrap();
        r.iter().chain(o.iter()).copied().collect()
    };
    let mut p = power_iteration(apply, adjoint, 2 * block, tol, max_iter);
    p.singular_value = p.singular_value.max(0.0);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn hyper(t: f64, s: f64, o: f64) -> Hyperparameters {
        Hyperparameters::new(t, s, o).unwrap()
    }

    #[test]
    fn d2_annihilates_affine_rows() {
        let r = Array2::from_shape_fn((2, 9), |(d, t)| 1.5 + d as f64 - 0.25 * t as f64);
        assert!(d2_apply(r.view()).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert_eq!(d2_apply(array![[0.0, 1.0, 0.0]].view()).unwrap(), array![[-1.0]]);
        assert!(matches!(d2_apply(array![[1.0, 2.0]].view()), Err(Error::Shape(_))));
    }

    #[test]
    fn d2_adjoint_of_a_scalar_is_the_stencil() {
        let out = d2_adjoint(array![[2.0]].view(), 3).unwrap();
        assert_eq!(out, array![[1.0, -2.0, 1.0]]);
    }

    #[test]
    fn graph_difference_uses_stored_orientation() {
        let g = EpiGraph::new(2, [(1, 0)]).unwrap();
        let r = array![[1.0, 2.0], [4.0, 2.0]];
        assert_eq!(graph_apply(r.view(), &g).unwrap(), array![[-3.0, 0.0]]);
        let empty = EpiGraph::empty(2);
        assert_eq!(graph_apply(r.view(), &empty).unwrap().dim(), (0, 2));
        assert!(graph_apply(r.view(), &EpiGraph::empty(3)).is_err());
    }

    #[test]
    fn degenerate_weights_reduce_l_to_identity_blocks() {
        let g = EpiGraph::new(2, [(0, 1)]).unwrap();
        let h = hyper(0.0, 0.0, 1.0);
        let r = array![[1.0, 2.0, 3.0], [0.5, 0.0, -1.0]];
        let o = array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        let q = l_apply(r.view(), o.view(), &g, &h).unwrap();
        assert!(q.q1.iter().all(|v| *v == 0.0));
        assert!(q.q3.iter().all(|v| *v == 0.0));
        assert_eq!(q.q2, r);
        assert_eq!(q.q4, o);
        let (ar, ao) = l_adjoint(&q, &g, &h).unwrap();
        assert_eq!(ar, r);
        assert_eq!(ao, o);
    }

    #[test]
    fn norm_bound_examples() {
        assert_eq!(op_norm_bound(&hyper(3.5, 0.0, 0.025), 4.0, 0.0), 50.0);
        assert_eq!(op_norm_bound(&hyper(0.0, 0.0, 2.0), 4.0, 3.0), 4.0);
        assert_eq!(op_norm_bound(&hyper(1.0, 0.0, f64::INFINITY), 4.0, 0.0), 5.0);
    }

    #[test]
    fn power_iteration_on_simple_maps() {
        let id = power_iteration(|x| x.to_vec(), |x| x.to_vec(), 5, 1e-12, 100);
        assert!((id.singular_value - 1.0).abs() < 1e-12 && id.converged);
        let diag = |x: &[f64]| vec![3.0 * x[0], x[1]];
        let p = power_iteration(diag, diag, 2, 1e-14, 1000);
        assert!((p.singular_value - 3.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_on_d2_stays_below_its_bound() {
        let days = 200;
        let apply = |x: &[f64]| {
            let r = ArrayView2::from_shape((1, days), x).unwrap();
            d2_apply(r).unwrap().into_raw_vec_and_offset().0
        };
        let adjoint = |y: &[f64]| {
            let q = ArrayView2::from_shape((1, days - 2), y).unwrap();
            d2_adjoint(q, days).unwrap().into_raw_vec_and_offset().0
        };
        let p = power_iteration(apply, adjoint, days, 1e-12, 200_000);
        assert!(p.singular_value > 1.9 && p.singular_value <= 2.0, "{p:?}");
    }

    #[test]
    fn graph_norm_respects_degree_bound() {
        // path graph: ||G||² = 2 + 2cos(π/n) < 4 = 2·max degree
        let g = EpiGraph::new(6, (0..5).map(|i| (i, i + 1))).unwrap();
        let n2 = graph_norm_sq(&g);
        let exact = 2.0 + 2.0 * (std::f64::consts::PI / 6.0).cos();
        assert!(n2 >= exact * (1.0 - 1e-9) && n2 <= 4.0, "{n2} vs {exact}");
        assert_eq!(graph_norm_sq(&EpiGraph::empty(3)), 0.0);
    }
}
