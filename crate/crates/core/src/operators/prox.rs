//! Closed-form proximal operators.

use super::DualVariable;

/// `prox_{s|.|}(q) = sign(q) max(|q| - s, 0)`.
#[inline]
pub fn prox_soft_threshold(q: f64, s: f64) -> f64 {
    debug_assert!(s >= 0.0);
    let m = q.abs() - s;
    if m > 0.0 {
        m.copysign(q)
    } else {
        0.0
    }
}

/// Projection onto the nonnegative half-line.
#[inline]
pub fn prox_nonneg(q: f64) -> f64 {
    q.max(0.0)
}

/// `prox_{τ d_KL(z|.)}(p) = (p - τ + sqrt((p - τ)² + 4τz)) / 2`.
///
/// The branch for `p < τ` uses the conjugate form to avoid cancellation, so
/// the result stays strictly positive whenever `z > 0`.
#[inline]
pub fn prox_kl_scalar(p: f64, z: f64, tau: f64) -> f64 {
    debug_assert!(tau > 0.0 && z >= 0.0);
    let d = p - tau;
    let root = (d * d + 4.0 * tau * z).sqrt();
    if d >= 0.0 {
        0.5 * (d + root)
    } else if z == 0.0 {
        0.0
    } else {
        2.0 * tau * z / (root - d)
    }
}

/// Proximal operator of `τ f(., . | z, Φz)` where `f(r, o) = d_KL(z | rΦz + o)`,
/// or the indicator of `{(0, 0)}` when `z = Φz = 0`.
#[inline]
pub fn prox_f(r: f64, o: f64, z: f64, phiz: f64, tau: f64) -> (f64, f64) {
    if z == 0.0 && phiz == 0.0 {
        return (0.0, 0.0);
    }
    let beta = phiz * phiz + 1.0;
    let s = r * phiz + o;
    let c = (s - prox_kl_scalar(s, z, tau * beta)) / beta;
    (r - c * phiz, o - c)
}

/// Variant of [`prox_f`] for the no-outlier configuration: `o` is held at 0
/// wherever `Φz > 0`; where `Φz = 0 < z` the outlier carries the count and
/// `r` is left to the penalties.
#[inline]
pub fn prox_f_pinned(r: f64, o: f64, z: f64, phiz: f64, tau: f64) -> (f64, f64) {
    if z == 0.0 && phiz == 0.0 {
        (0.0, 0.0)
    } else if phiz > 0.0 {
        (prox_kl_scalar(r * phiz, z, tau * phiz * phiz) / phiz, 0.0)
    } else {
        (r, prox_kl_scalar(o, z, tau))
    }
}

/// `prox_{σH*}` by Moreau's identity: the ℓ1 blocks are clipped to `[-1, 1]`
/// and the positivity block is mapped to `min(q, 0)`. Independent of `σ`.
pub fn prox_h_conj(q: &DualVariable, sigma: f64) -> DualVariable {
    debug_assert!(sigma > 0.0);
    let clip = |v: &f64| v.clamp(-1.0, 1.0);
    DualVariable { q1: q.q1.map(clip), q2: q.q2.map(|v| v.min(0.0)), q3: q.q3.map(clip), q4: q.q4.map(clip) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(prox_soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(prox_soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(prox_soft_threshold(0.0, 2.0), 0.0);
        assert_eq!(prox_soft_threshold(-4.0, 1.5), -2.5);
    }

    #[test]
    fn nonneg_projection() {
        assert_eq!(prox_nonneg(-2.0), 0.0);
        assert_eq!(prox_nonneg(3.0), 3.0);
        assert_eq!(prox_nonneg(prox_nonneg(-1.0)), prox_nonneg(-1.0));
    }

    #[test]
    fn kl_prox_examples() {
        assert_eq!(prox_kl_scalar(2.0, 0.0, 1.0), 1.0);
        assert_eq!(prox_kl_scalar(1.0, 1.0, 1.0), 1.0);
        assert!((prox_kl_scalar(0.0, 4.0, 2.0) - 2.0).abs() < 1e-15);
        // deep in the cancellation regime the result stays positive
        let p = prox_kl_scalar(-1e8, 1e-6, 1.0);
        assert!(p > 0.0 && (p - 1e-14).abs() < 1e-20);
    }

    #[test]
    fn data_prox_special_cases() {
        assert_eq!(prox_f(3.0, -2.0, 0.0, 0.0, 0.7), (0.0, 0.0));
        let (r, o) = prox_f(1.3, 0.4, 2.0, 0.0, 0.5);
        assert_eq!(r, 1.3);
        assert_eq!(o, prox_kl_scalar(0.4, 2.0, 0.5));
        // output intensity equals the scalar KL prox of the input intensity
        let (r, o) = prox_f(1.0, 0.0, 2.0, 1.0, 0.5);
        let p = prox_kl_scalar(1.0, 2.0, 1.0);
        assert!((r + o - p).abs() < 1e-15);
    }

    #[test]
    fn pinned_prox_keeps_outliers_at_zero() {
        let (r, o) = prox_f_pinned(0.8, 0.3, 5.0, 2.0, 0.1);
        assert_eq!(o, 0.0);
        assert!((r * 2.0 - prox_kl_scalar(1.6, 5.0, 0.4)).abs() < 1e-15);
        assert_eq!(prox_f_pinned(0.8, 0.3, 0.0, 0.0, 0.1), (0.0, 0.0));
        assert_eq!(prox_f_pinned(0.8, 0.3, 2.0, 0.0, 0.1).0, 0.8);
    }

    #[test]
    fn dual_prox_clips_and_projects() {
        let q = DualVariable {
            q1: array![[0.5, 7.0, -9.0]],
            q2: array![[-3.0, 3.0]],
            q3: array![[1.5]],
            q4: array![[-0.2]],
        };
        let p = prox_h_conj(&q, 0.3);
        assert_eq!(p.q1, array![[0.5, 1.0, -1.0]]);
        assert_eq!(p.q2, array![[-3.0, 0.0]]);
        assert_eq!(p.q3, array![[1.0]]);
        assert_eq!(p.q4, array![[-0.2]]);
    }
}
