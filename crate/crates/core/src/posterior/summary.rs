//! Posterior summaries of β, linear functionals aᵀβ and τ(x) = φ(x)ᵀβ.

use serde::{Deserialize, Serialize};

use super::nuts::PosteriorDraws;
use crate::basis::BasisSpec;
use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::numeric::{mean, quantile_sorted, sorted, variance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl IntervalSummary {
    /// Mean and equal-tailed interval at `level` from a sample.
    pub fn from_sample(values: &[f64], level: f64) -> Self {
        let s = sorted(values);
        let a = 0.5 * (1.0 - level);
        Self {
            mean: mean(values),
            sd: if values.len() > 1 { variance(values).sqrt() } else { 0.0 },
            lo: quantile_sorted(&s, a),
            hi: quantile_sorted(&s, 1.0 - a),
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.lo <= truth && truth <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateSummary {
    pub tau_mean: Vec<f64>,
    pub tau_lo: Vec<f64>,
    pub tau_hi: Vec<f64>,
}

pub const DEFAULT_LEVEL: f64 = 0.95;

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("interval level must lie in (0, 1), got {level}")))
    }
}

/// Summary of aᵀβ over all draws.
pub fn summarize_contrast(draws: &PosteriorDraws, a: &[f64], level: f64) -> Result<IntervalSummary> {
    check_level(level)?;
    if a.len() != draws.n_beta {
        return Err(Error::DataShape(format!(
            "contrast has {} entries, posterior has {} coefficients",
            a.len(),
            draws.n_beta
        )));
    }
    let vals: Vec<f64> = draws
        .beta_draws()
        .map(|b| b.iter().zip(a).map(|(x, y)| x * y).sum())
        .collect();
    Ok(IntervalSummary::from_sample(&vals, level))
}

pub fn summarize_beta(draws: &PosteriorDraws, level: f64) -> Result<Vec<IntervalSummary>> {
    (0..draws.n_beta)
        .map(|j| {
            let mut a = vec![0.0; draws.n_beta];
            a[j] = 1.0;
            summarize_contrast(draws, &a, level)
        })
        .collect()
}

/// Per-row posterior mean and equal-tailed interval of φ(x)ᵀβ.
pub fn summarize_cate(draws: &PosteriorDraws, spec: &BasisSpec, x: &Covariates, level: f64) -> Result<CateSummary> {
    check_level(level)?;
    spec.check_dim(x.ncols())?;
    if spec.p() != draws.n_beta {
        return Err(Error::DataShape(format!(
            "basis has {} terms, posterior has {} coefficients",
            spec.p(),
            draws.n_beta
        )));
    }
    let betas: Vec<&[f64]> = draws.beta_draws().collect();
    let mut out = CateSummary {
        tau_mean: Vec::with_capacity(x.nrows()),
        tau_lo: Vec::with_capacity(x.nrows()),
        tau_hi: Vec::with_capacity(x.nrows()),
    };
    // Rows sharing a feature vector share a summary; basis rows repeat a lot
    // for indicator bases, so cache by φ(x).
    let mut cache: Vec<(Vec<f64>, IntervalSummary)> = Vec::new();
    for i in 0..x.nrows() {
        let phi = spec.row(x.row(i));
        let s = match cache.iter().find(|(k, _)| *k == phi) {
            Some((_, s)) => *s,
            None => {
                let vals: Vec<f64> = betas.iter().map(|b| b.iter().zip(&phi).map(|(u, v)| u * v).sum()).collect();
                let s = IntervalSummary::from_sample(&vals, level);
                if cache.len() < 64 {
                    cache.push((phi, s));
                }
                s
            }
        };
        out.tau_mean.push(s.mean);
        out.tau_lo.push(s.lo);
        out.tau_hi.push(s.hi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws_from(values: Vec<Vec<f64>>) -> PosteriorDraws {
        PosteriorDraws::from_arrays(vec![values.clone(), values], None).unwrap()
    }

    #[test]
    fn intercept_basis_is_constant() {
        let d = draws_from((0..100).map(|i| vec![i as f64 / 10.0]).collect());
        let x = Covariates::from_rows(&[vec![0.0], vec![5.0], vec![-3.0]]).unwrap();
        let s = summarize_cate(&d, &BasisSpec::intercept(), &x, 0.95).unwrap();
        assert!(s.tau_mean.iter().all(|&m| m == s.tau_mean[0]));
        assert!(s.tau_lo.iter().all(|&m| m == s.tau_lo[0]));
    }

    #[test]
    fn degenerate_draws_have_zero_width() {
        let d = draws_from(vec![vec![2.0, 8.0]; 50]);
        let x = Covariates::from_rows(&[vec![2.5], vec![0.1]]).unwrap();
        let s = summarize_cate(&d, &BasisSpec::tail(0, 1.96), &x, 0.95).unwrap();
        assert_eq!(s.tau_mean, vec![10.0, 2.0]);
        assert_eq!(s.tau_lo, s.tau_hi);
    }

    #[test]
    fn contrast_matches_subgroup_prediction() {
        let d = draws_from((0..200).map(|i| vec![1.0 + (i % 7) as f64, (i % 5) as f64]).collect());
        let c = summarize_contrast(&d, &[1.0, 1.0], 0.95).unwrap();
        let x = Covariates::from_rows(&[vec![3.0]]).unwrap();
        let s = summarize_cate(&d, &BasisSpec::tail(0, 1.96), &x, 0.95).unwrap();
        assert!((c.mean - s.tau_mean[0]).abs() < 1e-12);
        assert_eq!((c.lo, c.hi), (s.tau_lo[0], s.tau_hi[0]));
    }

    #[test]
    fn dimension_mismatch() {
        let d = draws_from(vec![vec![1.0]; 20]);
        assert!(summarize_contrast(&d, &[1.0, 0.0], 0.95).is_err());
        let x = Covariates::from_rows(&[vec![0.0]]).unwrap();
        assert!(summarize_cate(&d, &BasisSpec::tail(0, 1.0), &x, 0.95).is_err());
    }
}
