//! Small numeric helpers shared across estimators.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.96;
/// Nominal test level.
pub const ALPHA: f64 = 0.05;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased (n - 1) sample variance.
pub fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

/// Population (n) variance.
pub fn population_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Two-sided Wald p-value of `estimate` against `null` with standard error `se`.
pub fn wald_p_value(estimate: f64, null: f64, se: f64) -> f64 {
    let diff = estimate - null;
    if se > 0.0 && se.is_finite() {
        let z = diff.abs() / se;
        (2.0 * (1.0 - normal_cdf(z))).clamp(0.0, 1.0)
    } else if diff.abs() <= 1e-12 {
        1.0
    } else {
        0.0
    }
}

/// Upper-tail probability of a chi-square(df) statistic.
pub fn chi_square_sf(stat: f64, df: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    let chi = ChiSquared::new(df).expect("positive degrees of freedom");
    (1.0 - chi.cdf(stat)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_logit_roundtrip() {
        for &p in &[1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6] {
            assert!((expit(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(expit(-800.0), 0.0);
        assert_eq!(expit(800.0), 1.0);
    }

    #[test]
    fn variances() {
        let x = [1.0, 2.0, 3.0];
        assert!((sample_variance(&x) - 1.0).abs() < 1e-15);
        assert!((population_variance(&x) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wald_reference_values() {
        assert!((wald_p_value(1.96, 0.0, 1.0) - 0.05).abs() < 1e-3);
        assert_eq!(wald_p_value(0.0, 0.0, 0.0), 1.0);
        assert!((chi_square_sf(3.841_458_820_694_124, 1.0) - 0.05).abs() < 1e-9);
    }
}
