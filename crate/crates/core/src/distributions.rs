//! Reference distributions used for calibration.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::erf::erfc;

/// `P(χ²₁ > s)`, computed as `erfc(√(s/2))`.
pub fn chi2_1_sf(s: f64) -> f64 {
    if s.is_nan() {
        return f64::NAN;
    }
    if s <= 0.0 {
        return 1.0;
    }
    if s.is_infinite() {
        return 0.0;
    }
    erfc((s / 2.0).sqrt())
}

/// `P(χ²₁ ≤ s)`.
pub fn chi2_1_cdf(s: f64) -> f64 {
    1.0 - chi2_1_sf(s)
}

/// `P(χ²_k > s)` for general degrees of freedom.
pub fn chi2_sf(s: f64, dof: usize) -> f64 {
    if dof == 1 {
        return chi2_1_sf(s);
    }
    if s <= 0.0 {
        return 1.0;
    }
    if s.is_infinite() {
        return 0.0;
    }
    ChiSquared::new(dof as f64).expect("positive degrees of freedom").sf(s)
}

/// Upper quantile: the `s` with `P(χ²_k ≤ s) = level`.
pub fn chi2_quantile(level: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64).expect("positive degrees of freedom").inverse_cdf(level)
}

/// p-value of the boundary mixture `½δ₀ + ½χ²₁`; defined as 1 at `s = 0`.
pub fn boundary_mixture_pvalue(s: f64) -> f64 {
    if s <= 0.0 {
        1.0
    } else {
        0.5 * chi2_1_sf(s)
    }
}

/// Quantile function of `N(mean, variance)`.
pub fn normal_quantile(p: f64, mean: f64, variance: f64) -> f64 {
    Normal::new(mean, variance.sqrt()).expect("valid normal").inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chi2_1_critical_value() {
        assert_relative_eq!(chi2_1_sf(3.841458820694124), 0.05, epsilon = 1e-9);
        assert_relative_eq!(boundary_mixture_pvalue(3.841459), 0.025, epsilon = 1e-4);
        assert_eq!(boundary_mixture_pvalue(0.0), 1.0);
    }

    #[test]
    fn chi2_general_matches_dof_one() {
        for &s in &[0.1, 1.0, 2.5, 7.0] {
            let general = ChiSquared::new(1.0).unwrap().sf(s);
            assert_relative_eq!(chi2_1_sf(s), general, epsilon = 1e-10);
        }
        assert_relative_eq!(chi2_sf(7.814727903251178, 3), 0.05, epsilon = 1e-9);
        assert_relative_eq!(chi2_quantile(0.95, 1), 3.841458820694124, epsilon = 1e-8);
    }

    #[test]
    fn normal_quantile_median_and_tail() {
        assert_relative_eq!(normal_quantile(0.5, 1.0, 6.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(normal_quantile(0.975, 0.0, 1.0), 1.959963984540054, epsilon = 1e-10);
    }
}
