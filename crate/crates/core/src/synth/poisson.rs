//! Poisson variates from uniform draws.
//!
//! Intensities below 30 use sequential inversion of the CDF. Larger
//! intensities use Hörmann's transformed rejection with squeeze (PTRS,
//! "The transformed rejection method for generating Poisson random
//! variables", 1993), the same constants NumPy uses.

use rand::Rng;
use statrs::function::gamma::ln_gamma;

const INVERSION_LIMIT: f64 = 30.0;

/// One Poisson(`lambda`) draw. `lambda <= 0` (or NaN) yields 0.
pub fn sample<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if !(lambda > 0.0) {
        0
    } else if lambda < INVERSION_LIMIT {
        inversion(rng, lambda)
    } else {
        ptrs(rng, lambda)
    }
}

fn inversion<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= lambda / k as f64;
        let next = cdf + p;
        if next == cdf {
            // tail exhausted in double precision
            break;
        }
        cdf = next;
    }
    k
}

fn ptrs<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -lambda + k * loglam - ln_gamma(k + 1.0) {
            return k as u64;
        }
    }
}
