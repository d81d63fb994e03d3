//! Evaluation metrics for CATE estimates and interval estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    Ok(())
}

/// Root mean squared error between estimated and true CATE.
pub fn pehe(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    check_lengths(tau_hat, tau_true)?;
    let ss: f64 = tau_hat.iter().zip(tau_true).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / tau_hat.len() as f64).sqrt())
}

pub fn ate_error(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    check_lengths(tau_hat, tau_true)?;
    let diff: f64 = tau_hat.iter().zip(tau_true).map(|(a, b)| a - b).sum();
    Ok((diff / tau_hat.len() as f64).abs())
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // k = 0 and k = n put an endpoint exactly on the boundary; rounding must not move it
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub covered: usize,
    pub total: usize,
    pub rate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub mean_width: f64,
}

impl CoverageReport {
    pub fn from_counts(covered: usize, total: usize, mean_width: f64) -> Self {
        let (wilson_lo, wilson_hi) = wilson_interval(covered, total, Z_975);
        let rate = if total == 0 { 0.0 } else { covered as f64 / total as f64 };
        Self {
            covered,
            total,
            rate,
            wilson_lo: wilson_lo.min(rate),
            wilson_hi: wilson_hi.max(rate),
            mean_width,
        }
    }
}

pub fn coverage(intervals: &[(f64, f64)], truths: &[f64]) -> Result<CoverageReport> {
    if intervals.len() != truths.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} intervals vs {} truths",
            intervals.len(),
            truths.len()
        )));
    }
    if intervals.is_empty() {
        return Err(Error::invalid("coverage needs at least one interval"));
    }
    let mut covered = 0;
    let mut width = 0.0;
    for (i, (&(lo, hi), &t)) in intervals.iter().zip(truths).enumerate() {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::invalid(format!("interval {i} has lo > hi ({lo} > {hi})")));
        }
        if lo <= t && t <= hi {
            covered += 1;
        }
        width += hi - lo;
    }
    Ok(CoverageReport::from_counts(covered, intervals.len(), width / intervals.len() as f64))
}

/// Interval score: width plus a 2/α penalty per unit of miss.
pub fn winkler_score(lo: f64, hi: f64, truth: f64, alpha: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::invalid(format!("lo > hi ({lo} > {hi})")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut s = hi - lo;
    if truth < lo {
        s += 2.0 / alpha * (lo - truth);
    } else if truth > hi {
        s += 2.0 / alpha * (truth - hi);
    }
    Ok(s)
}

/// Mean per-unit loss of the policy 1{τ̂ > 0} against the oracle policy 1{τ > 0}.
pub fn policy_regret(tau_hat: &[f64], tau_true: &[f64]) -> Result<f64> {
    check_lengths(tau_hat, tau_true)?;
    let total: f64 = tau_hat
        .iter()
        .zip(tau_true)
        .map(|(&h, &t)| {
            let oracle = t.max(0.0);
            let policy = if h > 0.0 { t } else { 0.0 };
            oracle - policy
        })
        .sum();
    Ok(total / tau_hat.len() as f64)
}

/// Share of units the policy 1{τ̂ > 0} treats.
pub fn treat_rate(tau_hat: &[f64]) -> f64 {
    if tau_hat.is_empty() {
        return 0.0;
    }
    tau_hat.iter().filter(|&&t| t > 0.0).count() as f64 / tau_hat.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCoverage {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub report: CoverageReport,
}

/// Coverage within equal-count bins of `strata`.
pub fn stratified_coverage(
    intervals: &[(f64, f64)],
    truths: &[f64],
    strata: &[f64],
    n_bins: usize,
) -> Result<Vec<StratumCoverage>> {
    if n_bins < 2 {
        return Err(Error::invalid("n_bins must be at least 2"));
    }
    if strata.len() != truths.len() {
        return Err(Error::invalid("strata length does not match truths"));
    }
    if strata.len() < n_bins {
        return Err(Error::invalid(format!("need at least {n_bins} units to form {n_bins} bins")));
    }
    coverage(intervals, truths)?;
    let lo = strata.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = strata.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::degenerate("strata values are all equal"));
    }
    let n = strata.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| strata[a].total_cmp(&strata[b]));
    let mut out = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let idx = &order[b * n / n_bins..(b + 1) * n / n_bins];
        let iv: Vec<(f64, f64)> = idx.iter().map(|&i| intervals[i]).collect();
        let tr: Vec<f64> = idx.iter().map(|&i| truths[i]).collect();
        out.push(StratumCoverage {
            bin: b,
            lower: strata[idx[0]],
            upper: strata[idx[idx.len() - 1]],
            report: coverage(&iv, &tr)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn pehe_and_ate_examples() {
        assert_eq!(pehe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(pehe(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(pehe(&[0.0, 4.0], &[2.0, 2.0]).unwrap(), 2.0);
        assert_eq!(ate_error(&[0.0, 4.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(ate_error(&[2.5, 2.5], &[2.0, 2.0]).unwrap(), 0.5);
        assert!(pehe(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn wilson_reference_values() {
        let r = CoverageReport::from_counts(25, 30, 0.0);
        assert_abs_diff_eq!(r.rate, 0.8333, epsilon = 1e-4);
        assert_abs_diff_eq!(r.wilson_lo, 0.66, epsilon = 0.005);
        assert_abs_diff_eq!(r.wilson_hi, 0.93, epsilon = 0.005);
        let (lo, hi) = wilson_interval(3, 3, Z_975);
        assert_abs_diff_eq!(lo, 0.44, epsilon = 0.005);
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-12);
        let (lo, hi) = wilson_interval(0, 3, Z_975);
        assert_abs_diff_eq!(lo, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 0.56, epsilon = 0.005);
    }

    #[test]
    fn wilson_contains_point_estimate_exhaustive() {
        for n in 1..=1000usize {
            for k in 0..=n {
                let (lo, hi) = wilson_interval(k, n, Z_975);
                let p = k as f64 / n as f64;
                assert!(lo <= p + 1e-12 && p <= hi + 1e-12, "k={k} n={n}: [{lo}, {hi}] vs {p}");
            }
        }
    }

    #[test]
    fn coverage_counts_and_errors() {
        let r = coverage(&[(0.0, 1.0), (0.0, 2.0), (3.0, 4.0)], &[0.5, 2.0, 1.0]).unwrap();
        assert_eq!(r.covered, 2);
        assert_abs_diff_eq!(r.mean_width, 4.0 / 3.0);
        assert!(coverage(&[(1.0, 0.0)], &[0.5]).is_err());
        assert!(coverage(&[], &[]).is_err());
    }

    #[test]
    fn winkler_examples() {
        assert_eq!(winkler_score(0.0, 2.0, 1.0, 0.05).unwrap(), 2.0);
        assert_abs_diff_eq!(winkler_score(0.0, 2.0, -0.5, 0.05).unwrap(), 2.0 + 40.0 * 0.5, epsilon = 1e-12);
        assert_eq!(winkler_score(1.0, 1.0, 1.0, 0.05).unwrap(), 0.0);
        assert!(winkler_score(2.0, 1.0, 1.0, 0.05).is_err());
    }

    #[test]
    fn policy_examples() {
        let tau = vec![2.0; 100];
        assert_eq!(policy_regret(&vec![1.0; 100], &tau).unwrap(), 0.0);
        let hat: Vec<f64> = (0..100).map(|i| if i < 87 { 1.0 } else { -1.0 }).collect();
        assert_abs_diff_eq!(policy_regret(&hat, &tau).unwrap(), 0.26, epsilon = 1e-12);
        let mixed = vec![-1.0, 2.0, 0.5, -3.0];
        assert_eq!(policy_regret(&mixed, &mixed).unwrap(), 0.0);
    }

    #[test]
    fn stratified_bins() {
        let n = 1000;
        let strata: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64).collect();
        let iv = vec![(0.0, 1.0); n];
        let tr = vec![0.5; n];
        let bins = stratified_coverage(&iv, &tr, &strata, 5).unwrap();
        assert_eq!(bins.len(), 5);
        for b in &bins {
            assert!(b.report.total.abs_diff(200) <= 1);
            assert_eq!(b.report.rate, 1.0);
        }
        assert!(stratified_coverage(&iv, &tr, &vec![1.0; n], 5).is_err());
    }

    proptest! {
        #[test]
        fn pehe_dominates_ate_error(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..60)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(pehe(&a, &b).unwrap() + 1e-9 >= ate_error(&a, &b).unwrap());
        }

        #[test]
        fn degenerate_interval_minimises_winkler(truth in -10.0f64..10.0, lo_off in 0.0f64..5.0, hi_off in 0.0f64..5.0, shift in -8.0f64..8.0) {
            let best = winkler_score(truth, truth, truth, 0.05).unwrap();
            let other = winkler_score(truth + shift - lo_off, truth + shift + hi_off, truth, 0.05).unwrap();
            prop_assert!(best <= other + 1e-12);
        }
    }
}
