//! Count data, the extended Poisson/KL data term, the penalized objective and
//! the baseline estimators.

use chrono::{Days, NaiveDate};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{d2_apply, graph_apply, EpiGraph};
use crate::serial_interval::SerialInterval;

/// Daily counts, one row per territory and one column per day.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    values: Array2<f64>,
    territories: Vec<String>,
    dates: Vec<NaiveDate>,
}

impl CountMatrix {
    pub fn new(values: Array2<f64>, territories: Vec<String>, dates: Vec<NaiveDate>) -> Result<Self> {
        let (rows, days) = values.dim();
        if rows == 0 || days == 0 {
            return Err(Error::Shape(format!("count matrix must be non-empty, got {rows}x{days}")));
        }
        if territories.len() != rows {
            return Err(Error::Shape(format!("{} territory labels for {rows} rows", territories.len())));
        }
        if dates.len() != days {
            return Err(Error::Shape(format!("{} dates for {days} columns", dates.len())));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0].checked_add_days(Days::new(1)) != Some(w[1])) {
            return Err(Error::Data(format!("dates must be consecutive days: {} then {}", w[0], w[1])));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("counts must be finite".into()));
        }
        Ok(CountMatrix { values, territories, dates })
    }

    /// Counts labelled `"1".."D"`, starting on 2020-01-01.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        Self::from_values_starting(values, start)
    }

    pub fn from_values_starting(values: Array2<f64>, start: NaiveDate) -> Result<Self> {
        let (rows, days) = values.dim();
        let territories = (1..=rows).map(|d| d.to_string()).collect();
        let dates = (0..days as u64)
            .map(|k| start.checked_add_days(Days::new(k)).ok_or_else(|| Error::Data("date overflow".into())))
            .collect::<Result<_>>()?;
        Self::new(values, territories, dates)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn territories(&self) -> &[String] {
        &self.territories
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn num_territories(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_days(&self) -> usize {
        self.values.ncols()
    }

    /// Same labels, new values of identical shape.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::Shape(format!("expected {:?}, got {:?}", self.values.dim(), values.dim())));
        }
        Self::new(values, self.territories.clone(), self.dates.clone())
    }

    /// Rows `keep`, in that order.
    pub fn select_territories(&self, keep: &[usize]) -> Result<Self> {
        if keep.iter().any(|&i| i >= self.num_territories()) {
            return Err(Error::Shape("territory index out of range".into()));
        }
        Self::new(
            self.values.select(Axis(0), keep),
            keep.iter().map(|&i| self.territories[i].clone()).collect(),
            self.dates.clone(),
        )
    }
}

/// Regularization weights. `lambda_o = +∞` pins the outliers to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lambda_t: f64,
    pub lambda_s: f64,
    #[serde(with = "extended_real")]
    pub lambda_o: f64,
}

impl Hyperparameters {
    pub const LAMBDA_T: f64 = 3.5;
    pub const LAMBDA_S_JOINT: f64 = 0.002;
    pub const LAMBDA_O: f64 = 0.025;

    pub fn new(lambda_t: f64, lambda_s: f64, lambda_o: f64) -> Result<Self> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(lambda_t) || !ok(lambda_s) || !(lambda_o >= 0.0) {
            return Err(Error::Parameter(format!(
                "hyperparameters must be nonnegative, got ({lambda_t}, {lambda_s}, {lambda_o})"
            )));
        }
        Ok(Hyperparameters { lambda_t, lambda_s, lambda_o })
    }

    /// Independent per-territory estimation: `(3.5, 0, 0.025)`.
    pub fn per_territory() -> Self {
        Hyperparameters { lambda_t: Self::LAMBDA_T, lambda_s: 0.0, lambda_o: Self::LAMBDA_O }
    }

    /// Joint space-time estimation: `(3.5, 0.002, 0.025)`.
    pub fn joint() -> Self {
        Hyperparameters { lambda_t: Self::LAMBDA_T, lambda_s: Self::LAMBDA_S_JOINT, lambda_o: Self::LAMBDA_O }
    }

    /// Second stage of the two-step baseline: `(3.5, 0, +∞)`.
    pub fn no_outliers() -> Self {
        Hyperparameters { lambda_t: Self::LAMBDA_T, lambda_s: 0.0, lambda_o: f64::INFINITY }
    }

    pub fn outliers_pinned(&self) -> bool {
        self.lambda_o == f64::INFINITY
    }

    /// Weight of the outlier block in the stacked operator (0 when pinned).
    pub fn outlier_weight(&self) -> f64 {
        if self.outliers_pinned() {
            0.0
        } else {
            self.lambda_o
        }
    }

    /// Hyperparameters for counts multiplied by `alpha`: `(αλ_T, αλ_S, λ_O)`.
    pub fn covariant(&self, alpha: f64) -> Self {
        Hyperparameters { lambda_t: alpha * self.lambda_t, lambda_s: alpha * self.lambda_s, lambda_o: self.lambda_o }
    }
}

/// Serde helper writing `+∞` as the string `"inf"` (JSON has no infinity).
pub mod extended_real {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s.eq_ignore_ascii_case("inf") => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

/// Nonnegative counts and their causal convolution, the inputs of the data
/// term. Negative raw counts enter the data term as zero counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    counts: Array2<f64>,
    phi_z: Array2<f64>,
}

impl Observations {
    pub fn new(counts: ArrayView2<'_, f64>, phi: &SerialInterval) -> Result<Self> {
        if counts.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("counts must be finite".into()));
        }
        let phi_z = phi.convolve_past(counts).mapv(|v| v.max(0.0));
        Ok(Observations { counts: counts.mapv(|v| v.max(0.0)), phi_z })
    }

    pub fn from_counts(z: &CountMatrix, phi: &SerialInterval) -> Result<Self> {
        Self::new(z.values(), phi)
    }

    /// Explicit `(Z, ΦZ)`; both must be finite and nonnegative.
    pub fn from_parts(counts: Array2<f64>, phi_z: Array2<f64>) -> Result<Self> {
        if counts.dim() != phi_z.dim() {
            return Err(Error::Shape(format!("Z is {:?} but ΦZ is {:?}", counts.dim(), phi_z.dim())));
        }
        if counts.iter().chain(phi_z.iter()).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("Z and ΦZ must be finite and nonnegative".into()));
        }
        Ok(Observations { counts, phi_z })
    }

    pub fn counts(&self) -> ArrayView2<'_, f64> {
        self.counts.view()
    }

    pub fn phi_z(&self) -> ArrayView2<'_, f64> {
        self.phi_z.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.counts.dim()
    }

    /// `Z = ΦZ = 0` at `(d, t)`: the estimate is forced to `(0, 0)` there.
    pub fn is_silent(&self, d: usize, t: usize) -> bool {
        self.counts[[d, t]] == 0.0 && self.phi_z[[d, t]] == 0.0
    }

    /// Copy with every entry multiplied by `alpha > 0`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Observations { counts: &self.counts * alpha, phi_z: &self.phi_z * alpha }
    }
}

/// Joint estimate and solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    #[serde(skip)]
    pub r_hat: Array2<f64>,
    #[serde(skip)]
    pub o_hat: Array2<f64>,
    #[serde(skip)]
    pub p_hat: Array2<f64>,
    pub iterations: usize,
    /// Objective of the reported (projected) estimate.
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    /// Raw normalized increments `|Φ_k - Φ_{k-1}| / Φ_{k-1}`.
    pub increment_trace: Vec<f64>,
    /// Sliding-window maxima of the raw increments.
    pub smoothed_trace: Vec<f64>,
    /// Iteration index of each trace entry.
    pub trace_iterations: Vec<usize>,
    pub converged: bool,
    /// Most negative entry of the last primal iterate before projection
    /// (0 if none was negative).
    pub min_r_before_projection: f64,
    /// Entries changed by the final feasibility projection.
    pub projected_entries: usize,
}

/// `d_KL(z | p)`, defined for `z, p >= 0`.
pub fn kl_scalar(z: f64, p: f64) -> Result<f64> {
    if !(z >= 0.0) || !(p >= 0.0) {
        return Err(Error::Domain(format!("d_KL needs nonnegative arguments, got ({z}, {p})")));
    }
    Ok(kl_unchecked(z, p))
}

/// `d_KL(z | p)` with the convention `+∞` outside the domain.
#[inline]
pub(crate) fn kl_unchecked(z: f64, p: f64) -> f64 {
    if z > 0.0 && p > 0.0 {
        z * (z / p).ln() + p - z
    } else if z == 0.0 && p >= 0.0 {
        p
    } else {
        f64::INFINITY
    }
}

#[inline]
pub(crate) fn fidelity_entry(r: f64, o: f64, z: f64, phiz: f64) -> f64 {
    if z == 0.0 && phiz == 0.0 {
        if r == 0.0 && o == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        kl_unchecked(z, r * phiz + o)
    }
}

fn check_shapes(r: ArrayView2<'_, f64>, o: ArrayView2<'_, f64>, obs: &Observations) -> Result<()> {
    if r.dim() != obs.dim() || o.dim() != obs.dim() {
        return Err(Error::Shape(format!("R {:?}, O {:?} and Z {:?} must agree", r.dim(), o.dim(), obs.dim())));
    }
    Ok(())
}

/// `F(R, O | Z) = Σ f(R, O | Z, ΦZ)`; `+∞` off the feasible domain.
pub fn data_fidelity(r: ArrayView2<'_, f64>, o: ArrayView2<'_, f64>, obs: &Observations) -> Result<f64> {
    check_shapes(r, o, obs)?;
    let mut total = 0.0;
    for (d, (rr, or)) in r.outer_iter().zip(o.outer_iter()).enumerate() {
        let (zr, pr) = (obs.counts.row(d), obs.phi_z.row(d));
        for t in 0..rr.len() {
            total += fidelity_entry(rr[t], or[t], zr[t], pr[t]);
        }
    }
    Ok(total)
}

/// Individual terms of the penalized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub fidelity: f64,
    pub temporal: f64,
    pub spatial: f64,
    pub outlier: f64,
    /// `R >= 0` everywhere.
    pub r_nonnegative: bool,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        if !self.r_nonnegative {
            return f64::INFINITY;
        }
        self.fidelity + self.temporal + self.spatial + self.outlier
    }
}

pub fn objective_terms(
    r: ArrayView2<'_, f64>,
    o: ArrayView2<'_, f64>,
    obs: &Observations,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
) -> Result<ObjectiveTerms> {
    let fidelity = data_fidelity(r, o, obs)?;
    let temporal = hyper.lambda_t * d2_apply(r)?.iter().map(|v| v.abs()).sum::<f64>();
    let spatial = if hyper.lambda_s == 0.0 {
        0.0
    } else {
        hyper.lambda_s * graph_apply(r, graph)?.iter().map(|v| v.abs()).sum::<f64>()
    };
    let outlier = if hyper.outliers_pinned() {
        // O may only be nonzero where ΦZ = 0 (there it carries the count)
        let violated = o.indexed_iter().any(|((d, t), &v)| v != 0.0 && obs.phi_z[[d, t]] > 0.0);
        if violated {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        hyper.lambda_o * o.iter().map(|v| v.abs()).sum::<f64>()
    };
    Ok(ObjectiveTerms { fidelity, temporal, spatial, outlier, r_nonnegative: r.iter().all(|v| *v >= 0.0) })
}

/// `F + λ_T ||D2 R||_1 + ι_{>=0}(R) + λ_S ||G R||_1 + λ_O ||O||_1`.
pub fn objective(
    r: ArrayView2<'_, f64>,
    o: ArrayView2<'_, f64>,
    obs: &Observations,
    graph: &EpiGraph,
    hyper: &Hyperparameters,
) -> Result<f64> {
    Ok(objective_terms(r, o, obs, graph, hyper)?.total())
}

/// Per-day maximum-likelihood estimate `Z / ΦZ`: 0 where `Z = ΦZ = 0`, NaN
/// where it is undefined (`ΦZ <= 0` with nonzero `Z`).
pub fn mle(z: &CountMatrix, phi: &SerialInterval) -> Array2<f64> {
    let phi_z = phi.convolve_past(z.values());
    let mut out = z.values().to_owned();
    out.zip_mut_with(&phi_z, |v, &pz| {
        *v = if pz > 0.0 {
            *v / pz
        } else if *v == 0.0 && pz == 0.0 {
            0.0
        } else {
            f64::NAN
        }
    });
    out
}

/// Median and population standard deviation of a non-empty slice.
fn median_and_std(window: &[f64], scratch: &mut Vec<f64>) -> (f64, f64) {
    scratch.clear();
    scratch.extend_from_slice(window);
    scratch.sort_by(|a, b| a.total_cmp(b));
    let n = scratch.len();
    let median = if n % 2 == 1 { scratch[n / 2] } else { 0.5 * (scratch[n / 2 - 1] + scratch[n / 2]) };
    let mean = window.iter().sum::<f64>() / n as f64;
    let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (median, var.sqrt())
}

/// Sliding-median outlier removal. Samples farther than `k` in-window
/// standard deviations from the window median are replaced by the median.
/// Windows are centered and shrink symmetrically at the series ends.
pub fn sliding_median_baseline(z: &CountMatrix, window: usize, k: f64) -> Result<(CountMatrix, Array2<f64>)> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Parameter(format!("median window must be odd and >= 3, got {window}")));
    }
    if !(k > 0.0) {
        return Err(Error::Parameter(format!("threshold must be positive, got {k}")));
    }
    let half = window / 2;
    let values = z.values();
    let days = z.num_days();
    let mut clean = values.to_owned();
    let mut outliers = Array2::zeros(values.dim());
    let mut scratch = Vec::with_capacity(window);
    for (d, row) in values.outer_iter().enumerate() {
        let row = row.to_vec();
        for t in 0..days {
            let h = half.min(t).min(days - 1 - t);
            let (m, s) = median_and_std(&row[t - h..=t + h], &mut scratch);
            if (row[t] - m).abs() > k * s {
                clean[[d, t]] = m;
                outliers[[d, t]] = row[t] - m;
            }
        }
    }
    Ok((z.with_values(clean)?, outliers))
}

/// Divide each territory by the population standard deviation of its counts
/// (1 for constant rows). Returns the scaled counts and the factors.
pub fn standardize(z: &CountMatrix) -> (CountMatrix, Vec<f64>) {
    let values = z.values();
    let alpha: Vec<f64> = values
        .outer_iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = values.to_owned();
    for (mut row, a) in scaled.outer_iter_mut().zip(&alpha) {
        row.mapv_inplace(|v| v / a);
    }
    (z.with_values(scaled).expect("shape preserved"), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn counts(values: Array2<f64>) -> CountMatrix {
        CountMatrix::from_values(values).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_scalar(0.0, 3.0).unwrap(), 3.0);
        assert_eq!(kl_scalar(5.0, 5.0).unwrap(), 0.0);
        assert!((kl_scalar(2.0, 1.0).unwrap() - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((kl_scalar(2.0, 1.0).unwrap() - 0.386_294_4).abs() < 1e-7);
        assert_eq!(kl_scalar(1.0, 0.0).unwrap(), f64::INFINITY);
        assert!(matches!(kl_scalar(-1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(kl_scalar(1.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn data_fidelity_indicator_and_kl() {
        let obs = Observations::from_parts(Array2::zeros((1, 3)), Array2::zeros((1, 3))).unwrap();
        let zero = Array2::zeros((1, 3));
        assert_eq!(data_fidelity(zero.view(), zero.view(), &obs).unwrap(), 0.0);
        let mut r = zero.clone();
        r[[0, 1]] = 0.5;
        assert_eq!(data_fidelity(r.view(), zero.view(), &obs).unwrap(), f64::INFINITY);

        let obs = Observations::from_parts(array![[2.0]], array![[1.0]]).unwrap();
        assert_eq!(data_fidelity(array![[1.0]].view(), array![[1.0]].view(), &obs).unwrap(), 0.0);
    }

    #[test]
    fn objective_reduces_to_fidelity_without_penalty_activity() {
        let z = array![[2.0, 3.0, 1.0, 4.0], [1.0, 2.0, 2.0, 5.0]];
        let pz = array![[1.0, 2.0, 2.0, 3.0], [2.0, 1.0, 3.0, 2.0]];
        let obs = Observations::from_parts(z, pz).unwrap();
        let g = EpiGraph::new(2, [(0, 1)]).unwrap();
        let h = Hyperparameters::new(3.5, 0.2, 0.025).unwrap();
        let r = Array2::from_shape_fn((2, 4), |(_, t)| 1.0 + 0.1 * t as f64);
        let o = Array2::zeros((2, 4));
        let j = objective(r.view(), o.view(), &obs, &g, &h).unwrap();
        let f = data_fidelity(r.view(), o.view(), &obs).unwrap();
        assert!((j - f).abs() < 1e-12);
        let mut neg = r.clone();
        neg[[1, 2]] = -0.01;
        assert_eq!(objective(neg.view(), o.view(), &obs, &g, &h).unwrap(), f64::INFINITY);
    }

    #[test]
    fn pinned_outliers_only_allowed_where_phiz_vanishes() {
        let obs = Observations::from_parts(array![[2.0, 1.0, 1.0]], array![[0.0, 1.0, 1.0]]).unwrap();
        let g = EpiGraph::empty(1);
        let h = Hyperparameters::no_outliers();
        let r = array![[1.0, 1.0, 1.0]];
        assert!(objective(r.view(), array![[2.0, 0.0, 0.0]].view(), &obs, &g, &h).unwrap().is_finite());
        assert_eq!(objective(r.view(), array![[2.0, 0.1, 0.0]].view(), &obs, &g, &h).unwrap(), f64::INFINITY);
    }

    #[test]
    fn mle_ratio_and_sentinels() {
        let si = SerialInterval::from_weights(vec![1.0]).unwrap();
        // ΦZ[t] = Z[t-1]
        let z = counts(array![[10.0, 20.0, 0.0, 0.0, 3.0]]);
        let m = mle(&z, &si);
        assert!(m[[0, 0]].is_nan());
        assert_eq!(m[[0, 1]], 2.0);
        assert_eq!(m[[0, 2]], 0.0);
        assert_eq!(m[[0, 3]], 0.0);
        assert!(m[[0, 4]].is_nan());
    }

    #[test]
    fn sliding_median_examples() {
        let z = counts(array![[10.0, 10.0, 10.0, 100.0, 10.0, 10.0, 10.0]]);
        let (clean, o) = sliding_median_baseline(&z, 7, 2.5).unwrap();
        assert_eq!(clean.values(), array![[10.0; 7]]);
        assert_eq!(o, array![[0.0, 0.0, 0.0, 90.0, 0.0, 0.0, 0.0]]);

        let flat = counts(Array2::from_elem((2, 9), 4.0));
        let (clean, o) = sliding_median_baseline(&flat, 7, 2.5).unwrap();
        assert_eq!(clean, flat);
        assert!(o.iter().all(|v| *v == 0.0));

        let zero = counts(Array2::zeros((1, 5)));
        let (clean, o) = sliding_median_baseline(&zero, 7, 2.5).unwrap();
        assert_eq!(clean, zero);
        assert!(o.iter().all(|v| *v == 0.0));

        assert!(sliding_median_baseline(&zero, 6, 2.5).is_err());
        assert!(sliding_median_baseline(&zero, 1, 2.5).is_err());
    }

    #[test]
    fn standardize_examples() {
        let z = counts(array![[0.0, 2.0, 4.0], [0.0, 0.0, 0.0]]);
        let (s, alpha) = standardize(&z);
        assert!((alpha[0] - 1.632_993_161_855_452).abs() < 1e-12);
        assert_eq!(alpha[1], 1.0);
        assert!((s.values()[[0, 2]] - 4.0 / alpha[0]).abs() < 1e-15);
        assert_eq!(s.values().row(1), z.values().row(1));

        let scaled = counts(z.values().mapv(|v| 7.5 * v));
        let (s2, _) = standardize(&scaled);
        for (a, b) in s.values().iter().zip(s2.values().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn count_matrix_validation() {
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
        let gap = vec![start, start.succ_opt().unwrap().succ_opt().unwrap()];
        assert!(CountMatrix::new(Array2::zeros((1, 2)), vec!["a".into()], gap).is_err());
        assert!(CountMatrix::from_values(Array2::zeros((0, 3))).is_err());
        assert!(CountMatrix::from_values(array![[1.0, f64::NAN]]).is_err());
    }

    #[test]
    fn hyperparameters_serialize_infinity_as_text() {
        let h = Hyperparameters::no_outliers();
        let json = serde_json::to_string(&h).unwrap();
        assert!(json.contains("\"inf\""));
        let back: Hyperparameters = serde_json::from_str(&json).unwrap();
        assert_eq!(back, h);
        assert!(Hyperparameters::new(-1.0, 0.0, 0.0).is_err());
    }
}
