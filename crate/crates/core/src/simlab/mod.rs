//! Monte Carlo harness: known-truth processes, replicated studies and the
//! checks built on them (coverage, rates, double robustness, remainder
//! scaling, normality).

mod dgp;
mod study;

pub use dgp::{get_dgp, integrate, mixture_int_p2, mixture_pdf, Dgp, DgpKind, DGP_IDS};
pub use study::{
    crossfit_plugin, default_direction, dr_experiment, remainder_scaling, replication_seed, run_study, Broken,
    CellSummary, DrRecord, ReplicationRecord, ScalingRecord, StudyConfig, StudyResult,
};

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// One-sample Kolmogorov-Smirnov test against the standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub n: usize,
    pub statistic: f64,
    /// Asymptotic p-value with the Stephens small-sample correction.
    pub p_value: f64,
}

/// Kolmogorov survival function `Q(l) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 l^2)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut total = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        total += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * total).clamp(0.0, 1.0)
}

pub fn ks_normal(sample: &[f64]) -> KsResult {
    let n = sample.len();
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let norm = Normal::standard();
    let nf = n as f64;
    let statistic = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = norm.cdf(v);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    let root = nf.sqrt();
    KsResult {
        n,
        statistic,
        p_value: kolmogorov_q((root + 0.12 + 0.11 / root) * statistic),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_on_exact_quantiles() {
        let n = 400;
        let norm = Normal::standard();
        let q: Vec<f64> = (0..n).map(|i| norm.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
        let r = ks_normal(&q);
        assert!((r.statistic - 0.5 / n as f64).abs() < 1e-9, "{}", r.statistic);
        assert!(r.p_value > 0.999);
    }

    #[test]
    fn ks_rejects_a_shift() {
        let norm = Normal::standard();
        let q: Vec<f64> = (0..1000).map(|i| norm.inverse_cdf((i as f64 + 0.5) / 1000.0) + 0.3).collect();
        assert!(ks_normal(&q).p_value < 1e-3);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // tabulated critical values: Q(1.3581) = 0.05, Q(1.9495) = 0.001
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_q(1.9495) - 0.001).abs() < 1e-5);
    }
}
