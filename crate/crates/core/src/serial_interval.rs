//! Discretized serial-interval kernel and the causal convolution it defines.

use ndarray::{Array2, ArrayView2};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};

/// Gamma shape of the default COVID-19 serial interval.
pub const DEFAULT_SHAPE: f64 = 1.87;
/// Gamma rate (per day) of the default COVID-19 serial interval.
pub const DEFAULT_RATE: f64 = 0.28;
/// Default truncation length in days.
pub const DEFAULT_TAU: usize = 25;

/// Causal weights `w[u - 1]` for lags `u = 1..=tau`, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SerialInterval {
    weights: Vec<f64>,
    shape: f64,
    rate: f64,
}

impl SerialInterval {
    /// Gamma(`shape`, `rate`) mass on each unit interval `(u - 1, u]`,
    /// `u = 1..=tau_phi`, renormalized after truncation.
    pub fn discretize_gamma(shape: f64, rate: f64, tau_phi: usize) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::Parameter(format!("gamma shape must be positive, got {shape}")));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::Parameter(format!("gamma rate must be positive, got {rate}")));
        }
        if tau_phi == 0 {
            return Err(Error::Parameter("serial interval truncation must be at least one day".into()));
        }
        let cdf = |x: f64| if x <= 0.0 { 0.0 } else { gamma_lr(shape, rate * x) };
        let mut weights: Vec<f64> = (1..=tau_phi).map(|u| (cdf(u as f64) - cdf(u as f64 - 1.0)).max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Parameter(format!("Gamma({shape}, {rate}) has no mass on the first {tau_phi} days")));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(SerialInterval { weights, shape, rate })
    }

    /// Build from explicit lag weights (lag 1 first). Weights are renormalized.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Parameter("serial interval needs at least one weight".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Parameter("serial interval weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Parameter("serial interval weights sum to zero".into()));
        }
        Ok(SerialInterval {
            weights: weights.into_iter().map(|w| w / total).collect(),
            shape: f64::NAN,
            rate: f64::NAN,
        })
    }

    /// Weight of lag `u`, for `u` in `1..=tau`; zero outside.
    pub fn weight(&self, lag: usize) -> f64 {
        if lag == 0 {
            0.0
        } else {
            self.weights.get(lag - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tau(&self) -> usize {
        self.weights.len()
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Mean lag in days.
    pub fn mean(&self) -> f64 {
        self.weights.iter().enumerate().map(|(i, w)| (i + 1) as f64 * w).sum()
    }

    /// Standard deviation of the lag in days.
    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let d = (i + 1) as f64 - m;
                d * d * w
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `(ΦZ)[d, t] = Σ_{u=1..min(t, tau)} w_u Z[d, t - u]`, zero-padded before
    /// the first sample (indices are 0-based here).
    pub fn convolve_past(&self, counts: ArrayView2<'_, f64>) -> Array2<f64> {
        let (rows, days) = counts.dim();
        let mut out = Array2::zeros((rows, days));
        for (src, mut dst) in counts.outer_iter().zip(out.outer_iter_mut()) {
            for t in 1..days {
                let max_lag = t.min(self.weights.len());
                let mut acc = 0.0;
                for u in 1..=max_lag {
                    acc += self.weights[u - 1] * src[t - u];
                }
                dst[t] = acc;
            }
        }
        out
    }
}

impl Default for SerialInterval {
    fn default() -> Self {
        SerialInterval::discretize_gamma(DEFAULT_SHAPE, DEFAULT_RATE, DEFAULT_TAU)
            .expect("default serial interval parameters are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    /// Composite Gauss-Legendre quadrature of the Gamma density on (a, b].
    /// The density behaves like x^(shape-1) near 0, so the first interval is
    /// integrated after the substitution x = s^2 which removes the cusp.
    fn gamma_mass_quadrature(shape: f64, rate: f64, a: f64, b: f64) -> f64 {
        use statrs::function::gamma::ln_gamma;
        let log_norm = shape * rate.ln() - ln_gamma(shape);
        let density = |x: f64| {
            if x <= 0.0 {
                0.0
            } else {
                (log_norm + (shape - 1.0) * x.ln() - rate * x).exp()
            }
        };
        // 5-point Gauss-Legendre nodes/weights on [-1, 1].
        const NODES: [f64; 5] =
            [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
        const WEIGHTS: [f64; 5] = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
            0.236_926_885_056_189_1,
        ];
        let integrate = |g: &dyn Fn(f64) -> f64, lo: f64, hi: f64, pieces: usize| {
            let h = (hi - lo) / pieces as f64;
            let mut total = 0.0;
            for k in 0..pieces {
                let c = lo + (k as f64 + 0.5) * h;
                for (x, w) in NODES.iter().zip(WEIGHTS.iter()) {
                    total += w * g(c + 0.5 * h * x) * 0.5 * h;
                }
            }
            total
        };
        // ∫_a^b f(x) dx = ∫_{√a}^{√b} f(s²) 2s ds
        let substituted = |s: f64| density(s * s) * 2.0 * s;
        integrate(&substituted, a.sqrt(), b.sqrt(), 2000)
    }

    #[test]
    fn weights_match_quadrature_of_the_density() {
        let si = SerialInterval::discretize_gamma(1.87, 0.28, 25).unwrap();
        let raw: Vec<f64> = (1..=25).map(|u| gamma_mass_quadrature(1.87, 0.28, u as f64 - 1.0, u as f64)).collect();
        let total: f64 = raw.iter().sum();
        for (u, (w, q)) in si.weights().iter().zip(raw.iter()).enumerate() {
            assert!((w - q / total).abs() < 1e-10, "lag {}: {} vs {}", u + 1, w, q / total);
        }
        let mode = si.weights().iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0 + 1;
        assert!((3..=10).contains(&mode), "mode at lag {mode}");
    }

    #[test]
    fn moments_track_the_continuous_gamma() {
        let si = SerialInterval::default();
        let mean = 1.87 / 0.28;
        let std = 1.87f64.sqrt() / 0.28;
        assert!((si.mean() - mean).abs() <= 0.5, "mean {}", si.mean());
        assert!((si.std_dev() - std).abs() <= 0.5, "std {}", si.std_dev());
        assert!((si.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(si.weights().iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SerialInterval::discretize_gamma(0.0, 0.28, 25).is_err());
        assert!(SerialInterval::discretize_gamma(1.87, -1.0, 25).is_err());
        assert!(SerialInterval::discretize_gamma(1.87, 0.28, 0).is_err());
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let si = SerialInterval::default();
        let mut z = Array2::zeros((1, 40));
        z[[0, 0]] = 1.0;
        let out = si.convolve_past(z.view());
        assert_eq!(out[[0, 0]], 0.0);
        for t in 1..40 {
            assert_eq!(out[[0, t]], si.weight(t));
        }
    }

    #[test]
    fn constant_input_converges_to_the_constant() {
        let si = SerialInterval::default();
        let z = Array2::from_elem((2, 80), 3.5);
        let out = si.convolve_past(z.view());
        for t in si.tau()..80 {
            assert!((out[[0, t]] - 3.5).abs() < 1e-12);
        }
        assert!(out[[1, 5]] < 3.5);
    }

    #[test]
    fn zero_in_zero_out() {
        let si = SerialInterval::default();
        let out = si.convolve_past(Array2::zeros((3, 10)).view());
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn explicit_weights_are_renormalized() {
        let si = SerialInterval::from_weights(vec![1.0, 3.0]).unwrap();
        assert_eq!(si.weights(), &[0.25, 0.75]);
        let out = si.convolve_past(array![[4.0, 8.0, 0.0]].view());
        assert_eq!(out, array![[0.0, 1.0, 5.0]]);
        assert!(SerialInterval::from_weights(vec![]).is_err());
        assert!(SerialInterval::from_weights(vec![-1.0, 2.0]).is_err());
    }
}
