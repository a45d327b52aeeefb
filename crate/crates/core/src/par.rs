//! Execution policy for the data-parallel kernels.
//!
//! Every kernel that fans out work does so over independent rows (territories,
//! edges) or independent items (instances, seeds). Each unit of work is
//! computed sequentially, and reductions combine per-row partials in row
//! order, so results are bit-identical between [`Execution::Sequential`] and
//! [`Execution::Parallel`]. Without the `parallel` feature the parallel policy
//! silently degrades to sequential execution.

use ndarray::{ArrayViewMut1, ArrayViewMut2, Axis};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Arrays with fewer entries than this are always processed sequentially.
pub const PARALLEL_MIN_ENTRIES: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this policy actually runs on the rayon pool in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    fn worth_it(self, entries: usize) -> bool {
        self.is_parallel() && entries >= PARALLEL_MIN_ENTRIES
    }
}

/// Apply `f(row_index, row)` to every row of `out`.
pub fn for_each_row<F>(exec: Execution, mut out: ArrayViewMut2<'_, f64>, f: F)
where
    F: Fn(usize, ArrayViewMut1<'_, f64>) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.worth_it(out.len()) {
        out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = exec;
    for (i, row) in out.axis_iter_mut(Axis(0)).enumerate() {
        f(i, row);
    }
}

/// Apply `f(row_index, row_a, row_b)` to matching rows of two arrays with the
/// same number of rows.
pub fn for_each_row_pair<F>(exec: Execution, mut a: ArrayViewMut2<'_, f64>, mut b: ArrayViewMut2<'_, f64>, f: F)
where
    F: Fn(usize, ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) + Sync + Send,
{
    assert_eq!(a.nrows(), b.nrows());
    #[cfg(feature = "parallel")]
    if exec.worth_it(a.len() + b.len()) {
        a.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(b.axis_iter_mut(Axis(0)).into_par_iter())
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
        return;
    }
    let _ = exec;
    for (i, (ra, rb)) in a.axis_iter_mut(Axis(0)).zip(b.axis_iter_mut(Axis(0))).enumerate() {
        f(i, ra, rb);
    }
}

/// Sum `f(i)` over `0..n`, evaluating terms in parallel but adding them in
/// index order.
pub fn ordered_sum<F>(exec: Execution, n: usize, work_per_item: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let parts =
        map_indices(if exec.worth_it(n.saturating_mul(work_per_item)) { exec } else { Execution::Sequential }, n, f);
    parts.into_iter().sum()
}

/// Map `f` over `0..n`, preserving order.
pub fn map_indices<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Map `f` over a slice of independent jobs (instances, seeds, territories),
/// preserving order.
pub fn map_items<I, T, F>(exec: Execution, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && items.len() > 1 {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}
