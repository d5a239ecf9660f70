//! Error function and the standard normal CDF.
//!
//! `erf`/`erfc` are the fdlibm rational approximations (via `libm`), accurate
//! to about one ulp over the whole real line.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(z)`, without cancellation for large `z`.
#[inline]
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Mass of the standard normal on `[lo, hi]`, evaluated on whichever tail
/// keeps both terms small.
#[inline]
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        normal_sf(lo) - normal_sf(hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (1*3*...*(2n+1)).
    // Every term is positive, so the series is stable in f64.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= 2.0 * x * x / (2.0 * n + 1.0);
            sum += term;
            if term.abs() <= 1e-18 * sum.abs() {
                break;
            }
        }
        2.0 / PI.sqrt() * (-x * x).exp() * sum
    }

    #[test]
    fn erf_matches_series_oracle() {
        let mut x = -4.0;
        while x <= 4.0 {
            let diff = (erf(x) - erf_series(x)).abs();
            assert!(diff < 1e-13, "x={x}: {diff}");
            x += 0.0625;
        }
    }

    #[test]
    fn unit_bin_mass_at_zero() {
        // Φ(0.5) - Φ(-0.5) = erf(0.5/sqrt 2)
        let oracle = erf_series(0.5 * FRAC_1_SQRT_2);
        assert!((oracle - 0.382_924_922_548_026).abs() < 1e-14);
        assert!((normal_interval(-0.5, 0.5) - oracle).abs() < 1e-15);
    }

    #[test]
    fn tails_are_complementary() {
        for &z in &[-8.0, -1.0, 0.0, 0.3, 2.0, 9.0] {
            assert!((normal_cdf(z) + normal_sf(z) - 1.0).abs() < 1e-15);
        }
        assert!(normal_sf(10.0) > 0.0);
    }
}
