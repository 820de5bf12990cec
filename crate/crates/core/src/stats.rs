//! Summary statistics for Monte Carlo output.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (divisor `m - 1`).
pub fn sample_sd(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test against `N(0, 1)`.
///
/// The p-value uses the asymptotic Kolmogorov distribution at the
/// finite-sample-adjusted statistic `(sqrt(m) + 0.12 + 0.11/sqrt(m)) D`.
pub fn ks_standard_normal(values: &[f64]) -> KsTest {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let normal = Normal::standard();
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            (f - i as f64 / m).max((i + 1) as f64 / m - f)
        })
        .fold(0.0f64, f64::max);
    let root = m.sqrt();
    KsTest {
        statistic,
        p_value: kolmogorov_survival((root + 0.12 + 0.11 / root) * statistic),
    }
}

/// `P(K > t)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `(theoretical N(0,1) quantile, sorted sample value)` pairs at plotting
/// positions `(i - 1/2) / m`.
pub fn qq_points(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let normal = Normal::standard();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (normal.inverse_cdf((i as f64 + 0.5) / m), v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
        assert!((sample_sd(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Tabulated critical values of the limiting distribution.
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
    }

    #[test]
    fn ks_accepts_normal_and_rejects_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_standard_normal(&draws).p_value > 0.01);
        let shifted: Vec<f64> = draws.iter().map(|v| v + 0.5).collect();
        assert!(ks_standard_normal(&shifted).p_value < 1e-6);
    }

    #[test]
    fn ks_statistic_by_hand() {
        // Single point at 0: D = max(Phi(0) - 0, 1 - Phi(0)) = 0.5.
        assert!((ks_standard_normal(&[0.0]).statistic - 0.5).abs() < 1e-15);
    }

    #[test]
    fn qq_shape() {
        let pts = qq_points(&[3.0, -1.0, 0.5]);
        assert_eq!(pts.len(), 3);
        assert_eq!(pts.iter().map(|p| p.1).collect::<Vec<_>>(), vec![-1.0, 0.5, 3.0]);
        assert!(pts[1].0.abs() < 1e-12 && pts[0].0 < 0.0 && pts[2].0 > 0.0);
    }
}
