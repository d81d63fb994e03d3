//! Nuisance uncertainty by Bayesian-bootstrap refits pooled through a cut
//! posterior, and the cross-fit dispersion diagnostic.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationReport;
use crate::data::CausalDataset;
use crate::error::{Error, Result, StageExt};
use crate::metrics::Z_975;
use crate::numeric::{mean, variance};
use crate::pipeline::{self, ate_contrast, FitConfig};
use crate::posterior::{IntervalSummary, PosteriorDraws, PosteriorFit};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Concatenate,
    Rubin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModularConfig {
    pub m: usize,
    pub pooling: Pooling,
}

impl Default for ModularConfig {
    fn default() -> Self {
        Self {
            m: 8,
            pooling: Pooling::Concatenate,
        }
    }
}

/// Dirichlet(1, …, 1) weights scaled to sum to n.
pub fn bayesian_bootstrap_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let g: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1).max(1e-300)).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total * n as f64).collect()
}

/// Rubin's rules per coordinate: (mean, W + (1 + 1/M)·B, W, B).
pub fn rubin_combine(means: &[f64], variances: &[f64]) -> (f64, f64, f64, f64) {
    let m = means.len() as f64;
    let q = mean(means);
    let w = mean(variances);
    let b = if means.len() > 1 { variance(means) } else { 0.0 };
    (q, w + (1.0 + 1.0 / m) * b, w, b)
}

#[derive(Debug, Clone)]
pub struct PooledPosterior {
    pub per_m: Vec<PosteriorFit>,
    pub pooling: Pooling,
    pub pooled_mean: Vec<f64>,
    pub pooled_var: Vec<f64>,
    pub within_var: Vec<f64>,
    pub between_var: Vec<f64>,
    pub calibration: Option<CalibrationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingSummary {
    pub rule: Pooling,
    pub m: usize,
    pub per_m_ate: Vec<f64>,
    pub ate_within_var: f64,
    pub ate_between_var: f64,
    pub ate_total_var: f64,
}

fn contrast_values(fit: &PosteriorFit, a: &[f64]) -> Vec<f64> {
    fit.draws.beta_draws().map(|b| b.iter().zip(a).map(|(x, y)| x * y).sum()).collect()
}

impl PooledPosterior {
    pub fn from_fits(per_m: Vec<PosteriorFit>, pooling: Pooling) -> Result<Self> {
        if per_m.is_empty() {
            return Err(Error::invalid("no fits to pool"));
        }
        let p = per_m[0].draws.n_beta;
        if per_m.iter().any(|f| f.draws.n_beta != p) {
            return Err(Error::DataShape("pooled fits disagree on dimension".into()));
        }
        let mut pooled_mean = Vec::with_capacity(p);
        let mut pooled_var = Vec::with_capacity(p);
        let mut within_var = Vec::with_capacity(p);
        let mut between_var = Vec::with_capacity(p);
        for j in 0..p {
            let mut a = vec![0.0; p];
            a[j] = 1.0;
            let (ms, vs): (Vec<f64>, Vec<f64>) = per_m
                .iter()
                .map(|f| {
                    let v = contrast_values(f, &a);
                    (mean(&v), if v.len() > 1 { variance(&v) } else { 0.0 })
                })
                .unzip();
            let (q, t, w, b) = rubin_combine(&ms, &vs);
            within_var.push(w);
            between_var.push(b);
            pooled_mean.push(q);
            pooled_var.push(match pooling {
                Pooling::Rubin => t,
                Pooling::Concatenate => {
                    let all: Vec<f64> = per_m.iter().flat_map(|f| contrast_values(f, &a)).collect();
                    variance(&all)
                }
            });
        }
        Ok(Self {
            per_m,
            pooling,
            pooled_mean,
            pooled_var,
            within_var,
            between_var,
            calibration: None,
        })
    }

    pub fn concatenated(&self) -> Result<PosteriorDraws> {
        let parts: Vec<PosteriorDraws> = self.per_m.iter().map(|f| f.draws.clone()).collect();
        PosteriorDraws::concatenate(&parts)
    }

    /// Pooled summary of aᵀβ: quantiles of the concatenated draws, or a normal
    /// interval with Rubin's variance.
    pub fn contrast_summary(&self, a: &[f64], level: f64) -> Result<IntervalSummary> {
        if a.len() != self.pooled_mean.len() {
            return Err(Error::DataShape("contrast length mismatch".into()));
        }
        match self.pooling {
            Pooling::Concatenate => {
                let all: Vec<f64> = self.per_m.iter().flat_map(|f| contrast_values(f, a)).collect();
                Ok(IntervalSummary::from_sample(&all, level))
            }
            Pooling::Rubin => {
                let (q, t, _, _) = self.contrast_moments(a);
                let z = if (level - 0.95).abs() < 1e-12 {
                    Z_975
                } else {
                    use statrs::distribution::{ContinuousCDF, Normal};
                    Normal::standard().inverse_cdf(0.5 + 0.5 * level)
                };
                let sd = t.sqrt();
                Ok(IntervalSummary {
                    mean: q,
                    sd,
                    lo: q - z * sd,
                    hi: q + z * sd,
                })
            }
        }
    }

    fn contrast_moments(&self, a: &[f64]) -> (f64, f64, f64, f64) {
        let (ms, vs): (Vec<f64>, Vec<f64>) = self
            .per_m
            .iter()
            .map(|f| {
                let v = contrast_values(f, a);
                (mean(&v), if v.len() > 1 { variance(&v) } else { 0.0 })
            })
            .unzip();
        rubin_combine(&ms, &vs)
    }

    pub fn summary(&self, a: &[f64]) -> PoolingSummary {
        let (_, t, w, b) = self.contrast_moments(a);
        PoolingSummary {
            rule: self.pooling,
            m: self.per_m.len(),
            per_m_ate: self.per_m.iter().map(|f| mean(&contrast_values(f, a))).collect(),
            ate_within_var: w,
            ate_between_var: b,
            ate_total_var: t,
        }
    }
}

/// M bootstrap-reweighted nuisance refits, each followed by its own Phase-3 fit.
pub fn modular_fit(ds: &CausalDataset, cfg: &FitConfig, m: usize, pooling: Pooling) -> Result<PooledPosterior> {
    modular_fit_with(ds, cfg, &ModularConfig { m, pooling }, None)
}

pub(crate) fn modular_fit_with(
    ds: &CausalDataset,
    cfg: &FitConfig,
    mc: &ModularConfig,
    fixed_eta: Option<f64>,
) -> Result<PooledPosterior> {
    if mc.m < 2 {
        return Err(Error::invalid(format!("modular pooling needs m >= 2, got {}", mc.m)));
    }
    let runs: Vec<Result<(PosteriorFit, Option<CalibrationReport>)>> = (0..mc.m)
        .into_par_iter()
        .map(|m| {
            let mut r = rng::stream(cfg.seed, &[rng::tag("bootstrap"), m as u64]);
            let w = bayesian_bootstrap_weights(ds.len(), &mut r);
            let prep = pipeline::prepare(ds, cfg, Some(&w))?;
            pipeline::phase3(&prep, cfg, fixed_eta, cfg.phase3_seed(m as u64 + 1))
        })
        .collect();
    let mut fits = Vec::with_capacity(mc.m);
    let mut report = None;
    for (m, r) in runs.into_iter().enumerate() {
        let (fit, rep) = r.stage(format!("bootstrap draw m={m}"))?;
        report = report.or(rep);
        fits.push(fit);
    }
    let mut pooled = PooledPosterior::from_fits(fits, mc.pooling)?;
    pooled.calibration = report;
    Ok(pooled)
}

/// ρ above this suggests turning modular pooling on.
pub const DISPERSION_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub rho: f64,
    pub ate_means: Vec<f64>,
    pub ci_widths: Vec<f64>,
    pub recommend_modular: bool,
}

/// sd of the posterior-mean ATEs over mean interval width.
pub fn dispersion_from(ate_means: &[f64], ci_widths: &[f64]) -> Result<DispersionReport> {
    if ate_means.len() < 2 || ate_means.len() != ci_widths.len() {
        return Err(Error::invalid("dispersion needs at least two repeats with matching widths"));
    }
    let w = mean(ci_widths);
    if !(w > 0.0) {
        return Err(Error::degenerate("mean interval width is zero"));
    }
    let rho = variance(ate_means).max(0.0).sqrt() / w;
    Ok(DispersionReport {
        rho,
        ate_means: ate_means.to_vec(),
        ci_widths: ci_widths.to_vec(),
        recommend_modular: rho > DISPERSION_THRESHOLD,
    })
}

/// Refit with `k_repeats` fresh cross-fit seeds and compare the spread of
/// ATE estimates to the interval width.
pub fn dispersion_ratio(ds: &CausalDataset, cfg: &FitConfig, k_repeats: usize) -> Result<DispersionReport> {
    if k_repeats < 2 {
        return Err(Error::invalid("k_repeats must be at least 2"));
    }
    let fits: Vec<Result<(f64, f64)>> = (0..k_repeats)
        .into_par_iter()
        .map(|k| {
            let c = FitConfig {
                seed: rng::derive_seed(cfg.seed, &[rng::tag("dispersion"), k as u64]),
                modular: None,
                ..cfg.clone()
            };
            let r = pipeline::fit(ds, &c)?;
            Ok((r.ate.mean, r.ate.width()))
        })
        .collect();
    let mut means = Vec::with_capacity(k_repeats);
    let mut widths = Vec::with_capacity(k_repeats);
    for (k, r) in fits.into_iter().enumerate() {
        let (m, w) = r.stage(format!("dispersion repeat {k}"))?;
        means.push(m);
        widths.push(w);
    }
    dispersion_from(&means, &widths)
}

/// Contrast vector for the sample-average effect of a dataset under `cfg`.
pub fn ate_contrast_for(ds: &CausalDataset, cfg: &FitConfig) -> Result<Vec<f64>> {
    Ok(ate_contrast(&crate::basis::evaluate_basis(&cfg.basis, &ds.x)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpKind, DgpSpec};
    use crate::nuisance::SeverityPreset;
    use crate::posterior::{ChainDraws, LikelihoodKind, SamplerConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn bootstrap_weight_contract() {
        let mut r = rng::stream(1, &[]);
        assert_eq!(bayesian_bootstrap_weights(1, &mut r), vec![1.0]);
        let w = bayesian_bootstrap_weights(37, &mut r);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 37.0, epsilon = 1e-9);
        let n = 5;
        let mut acc = vec![0.0; n];
        for _ in 0..10_000 {
            for (a, v) in acc.iter_mut().zip(bayesian_bootstrap_weights(n, &mut r)) {
                *a += v;
            }
        }
        for a in acc {
            assert!((a / 10_000.0 - 1.0).abs() < 0.05);
        }
    }

    fn fake_fit(values: &[f64]) -> PosteriorFit {
        let chain = ChainDraws {
            draws: values.to_vec(),
            energy: vec![0.0; values.len()],
            divergent: vec![false; values.len()],
            accept_stat: vec![0.8; values.len()],
            tree_depth: vec![1; values.len()],
            n_leapfrog: vec![1; values.len()],
            step_size: 0.1,
            inv_metric: vec![1.0],
            warmup_divergences: 0,
        };
        PosteriorFit {
            draws: PosteriorDraws {
                dim: 1,
                n_beta: 1,
                warmup: 0,
                chains: vec![chain],
            },
            diagnostics: None,
            likelihood: LikelihoodKind::default(),
            eta: 1.0,
            init: vec![0.0],
        }
    }

    #[test]
    fn identical_draws_have_no_between_variance() {
        let f = fake_fit(&[1.0, 2.0, 3.0, 6.0]);
        let p = PooledPosterior::from_fits(vec![f.clone(), f.clone(), f], Pooling::Rubin).unwrap();
        assert_eq!(p.between_var[0], 0.0);
        assert_abs_diff_eq!(p.pooled_var[0], p.within_var[0], epsilon = 1e-15);
        assert_eq!(p.concatenated().unwrap().total_draws(), 12);
    }

    #[test]
    fn dispersion_of_identical_repeats_is_zero() {
        let r = dispersion_from(&[2.0, 2.0, 2.0], &[0.4, 0.4, 0.4]).unwrap();
        assert_eq!(r.rho, 0.0);
        assert!(!r.recommend_modular);
        assert!(dispersion_from(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(dispersion_from(&[0.0, 0.2], &[0.5, 0.5]).unwrap().recommend_modular);
    }

    proptest! {
        #[test]
        fn rubin_identity(per in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2..20), 2..8)) {
            let fits: Vec<PosteriorFit> = per.iter().map(|v| fake_fit(v)).collect();
            let p = PooledPosterior::from_fits(fits, Pooling::Rubin).unwrap();
            let means: Vec<f64> = per.iter().map(|v| mean(v)).collect();
            let vars: Vec<f64> = per.iter().map(|v| variance(v)).collect();
            let m = per.len() as f64;
            let w = vars.iter().sum::<f64>() / m;
            let gm = means.iter().sum::<f64>() / m;
            let b = means.iter().map(|x| (x - gm).powi(2)).sum::<f64>() / (m - 1.0);
            prop_assert!((p.pooled_var[0] - (w + (1.0 + 1.0 / m) * b)).abs() < 1e-10);
            prop_assert!((p.pooled_mean[0] - gm).abs() < 1e-12);
            let cat = PooledPosterior::from_fits(p.per_m.clone(), Pooling::Concatenate).unwrap();
            let total: usize = per.iter().map(|v| v.len()).sum();
            prop_assert_eq!(cat.concatenated().unwrap().total_draws(), total);
        }
    }

    #[test]
    fn pooled_fit_runs_and_reports() {
        let g = generate(&DgpSpec::new(DgpKind::Whale, 600, 0.05, 31)).unwrap();
        let cfg = FitConfig {
            sampler: SamplerConfig {
                warmup: 200,
                samples: 200,
                ..Default::default()
            },
            modular: Some(ModularConfig { m: 3, pooling: Pooling::Rubin }),
            ..FitConfig::with_severity(SeverityPreset::Severe)
        };
        let r = pipeline::fit(&g.dataset, &cfg).unwrap();
        let pool = r.pooling.as_ref().unwrap();
        assert_eq!(pool.m, 3);
        assert!(pool.ate_total_var >= pool.ate_within_var);
        assert!(r.summary_json().get("pooling").is_some());
        assert_eq!(r.draws.total_draws(), 3 * 2 * 200);
    }
}
