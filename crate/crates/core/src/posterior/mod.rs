//! Phase 3: generalised posterior over basis coefficients.

mod diagnostics;
mod nuts;
mod summary;
mod target;

use nalgebra::{DMatrix, DVector};

pub use diagnostics::{bfmi, diagnose, effective_sample_size, split_r_hat, ChainDiagnostics};
pub use nuts::{nuts_sample, ChainDraws, PosteriorDraws, SamplerConfig};
pub use summary::{
    summarize_beta, summarize_cate, summarize_contrast, CateSummary, IntervalSummary, DEFAULT_LEVEL,
};
pub use target::{
    GeneralizedPosterior, LikelihoodKind, LikelihoodSpec, LogDensity, PriorFamily, PriorSpec,
};

use crate::basis::DesignMatrix;
use crate::error::{Error, Result};
use crate::losses::{mad, MAD_CONSISTENCY};
use crate::pseudo::PseudoOutcomes;

/// Checked log-density and gradient of the generalised posterior at β
/// (plus log σ when the likelihood infers a scale).
pub fn log_density_and_grad(
    theta: &[f64],
    phi: &DesignMatrix,
    pseudo: &PseudoOutcomes,
    lik: &LikelihoodSpec,
    prior: &PriorSpec,
) -> Result<(f64, Vec<f64>)> {
    let kind = lik.resolve(&pseudo.d)?;
    let post = GeneralizedPosterior::new(phi.clone(), pseudo.d.clone(), pseudo.weights.clone(), kind, lik.eta, *prior)?;
    post.evaluate(theta)
}

/// Weighted least squares; `None` when ΦᵀWΦ is singular.
pub fn weighted_least_squares(phi: &DesignMatrix, y: &[f64], w: &[f64]) -> Option<Vec<f64>> {
    let p = phi.ncols();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for i in 0..phi.nrows() {
        let row = phi.row(i);
        for j in 0..p {
            b[j] += w[i] * row[j] * y[i];
            for k in 0..p {
                a[(j, k)] += w[i] * row[j] * row[k];
            }
        }
    }
    let chol = a.cholesky()?;
    let sol = chol.solve(&b);
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
}

/// Least absolute deviations by iteratively reweighted least squares,
/// followed by reweighting with ψ(r)/r of the redescending likelihood.
/// Starting a redescending fit at the LAD solution keeps it away from the
/// flat region where every residual is huge.
pub fn robust_init(phi: &DesignMatrix, d: &[f64], w: &[f64], kind: &LikelihoodKind) -> Vec<f64> {
    let p = phi.ncols();
    let mut beta = weighted_least_squares(phi, d, w).unwrap_or_else(|| vec![0.0; p]);
    let floor = mad(d, false).map(|m| 1e-6 * m).unwrap_or(1e-9).max(1e-12);
    for _ in 0..50 {
        let r = residuals(phi, d, &beta);
        let ww: Vec<f64> = r.iter().zip(w).map(|(ri, wi)| wi / ri.abs().max(floor)).collect();
        match weighted_least_squares(phi, d, &ww) {
            Some(next) => {
                let step: f64 = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).sum();
                beta = next;
                if step < 1e-10 {
                    break;
                }
            }
            None => break,
        }
    }
    if matches!(kind, LikelihoodKind::Welsch { .. } | LikelihoodKind::Tukey { .. }) {
        for _ in 0..100 {
            let r = residuals(phi, d, &beta);
            let ww: Vec<f64> = r
                .iter()
                .zip(w)
                .map(|(ri, wi)| {
                    let (_, psi, psi_prime) = kind.rho_psi(*ri, 1.0);
                    wi * if ri.abs() > 1e-12 { psi / ri } else { psi_prime }
                })
                .collect();
            match weighted_least_squares(phi, d, &ww) {
                Some(next) => {
                    let step: f64 = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).sum();
                    beta = next;
                    if step < 1e-10 {
                        break;
                    }
                }
                None => break,
            }
        }
    }
    beta
}

fn residuals(phi: &DesignMatrix, d: &[f64], beta: &[f64]) -> Vec<f64> {
    phi.apply(beta).iter().zip(d).map(|(f, y)| y - f).collect()
}

#[derive(Debug, Clone)]
pub struct PosteriorFit {
    pub draws: PosteriorDraws,
    /// `None` when fewer than two chains were run.
    pub diagnostics: Option<ChainDiagnostics>,
    /// Likelihood after MAD rescaling.
    pub likelihood: LikelihoodKind,
    pub eta: f64,
    pub init: Vec<f64>,
}

impl PosteriorFit {
    pub fn posterior_mean(&self) -> Vec<f64> {
        let p = self.draws.n_beta;
        let mut m = vec![0.0; p];
        let mut n = 0.0;
        for b in self.draws.beta_draws() {
            for (a, v) in m.iter_mut().zip(b) {
                *a += v;
            }
            n += 1.0;
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// Build the posterior for (Φ, D), initialise robustly and run NUTS.
pub fn fit_posterior(
    phi: &DesignMatrix,
    pseudo: &PseudoOutcomes,
    lik: &LikelihoodSpec,
    prior: &PriorSpec,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<PosteriorFit> {
    let kind = lik.resolve(&pseudo.d)?;
    let post = GeneralizedPosterior::new(phi.clone(), pseudo.d.clone(), pseudo.weights.clone(), kind, lik.eta, *prior)?;
    let mut init = robust_init(phi, &pseudo.d, &pseudo.weights, &kind);
    if kind.infers_sigma() {
        let r = residuals(phi, &pseudo.d, &init);
        let s = mad(&r, false).map(|m| m / MAD_CONSISTENCY).unwrap_or(1.0);
        init.push(s.max(1e-8).ln());
    }
    let mut draws = nuts_sample(&post, &init, sampler, seed)?;
    draws.n_beta = phi.ncols();
    let diagnostics = if draws.n_chains() >= 2 && draws.n_samples() >= 10 {
        Some(diagnose(&draws)?)
    } else {
        None
    };
    if draws.beta_draws().any(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric("non-finite posterior draw"));
    }
    Ok(PosteriorFit {
        draws,
        diagnostics,
        likelihood: kind,
        eta: lik.eta,
        init,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisSpec, DesignMatrix};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal, StudentT};

    fn regression(n: usize, seed: u64, heavy: bool) -> (DesignMatrix, PseudoOutcomes) {
        let mut r = rng::stream(seed, &[]);
        let t3 = StudentT::new(3.0).unwrap();
        let mut v = Vec::new();
        let mut d = Vec::new();
        for _ in 0..n {
            let x: f64 = r.sample(StandardNormal);
            v.extend([1.0, x]);
            let e: f64 = if heavy { t3.sample(&mut r) } else { r.sample(StandardNormal) };
            d.push(2.0 - x + e);
        }
        let phi = DesignMatrix::from_row_major(n, 2, v, BasisSpec::parse("1, x0").unwrap()).unwrap();
        let pseudo = PseudoOutcomes { d, weights: vec![1.0; n], source_arm: vec![true; n] };
        (phi, pseudo)
    }

    fn kinds() -> [LikelihoodKind; 6] {
        [
            LikelihoodKind::Welsch { c: 1.34 },
            LikelihoodKind::Gaussian { sigma: Some(1.3) },
            LikelihoodKind::Gaussian { sigma: None },
            LikelihoodKind::StudentT { nu: 3.0, sigma: Some(0.8) },
            LikelihoodKind::StudentT { nu: 4.0, sigma: None },
            LikelihoodKind::tukey_default(),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn gradient_matches_finite_differences(
            k in 0usize..6,
            b0 in -4.0f64..4.0,
            b1 in -4.0f64..4.0,
            ls in -1.0f64..1.0,
            eta in 0.2f64..3.0,
            gaussian_prior in any::<bool>(),
        ) {
            let (phi, mut pseudo) = regression(60, 3, true);
            pseudo.weights = (0..60).map(|i| 0.5 + (i % 3) as f64 * 0.5).collect();
            let kind = kinds()[k];
            let lik = LikelihoodSpec { kind, eta, mad_rescale: false };
            let prior = PriorSpec {
                family: if gaussian_prior { PriorFamily::Gaussian } else { PriorFamily::StudentT { nu: 3.0 } },
                scale: 2.5,
            };
            let mut theta = vec![b0, b1];
            if kind.infers_sigma() {
                theta.push(ls);
            }
            let (_, g) = log_density_and_grad(&theta, &phi, &pseudo, &lik, &prior).unwrap();
            for j in 0..theta.len() {
                let h = 1e-5 * (1.0 + theta[j].abs());
                let mut up = theta.clone();
                up[j] += h;
                let mut dn = theta.clone();
                dn[j] -= h;
                let fu = log_density_and_grad(&up, &phi, &pseudo, &lik, &prior).unwrap().0;
                let fd = log_density_and_grad(&dn, &phi, &pseudo, &lik, &prior).unwrap().0;
                let num = (fu - fd) / (2.0 * h);
                let rel = (num - g[j]).abs() / g[j].abs().max(1.0);
                prop_assert!(rel < 1e-6, "kind {:?} coord {} analytic {} numeric {}", kind, j, g[j], num);
            }
        }
    }

    #[test]
    fn robust_init_ignores_gross_outliers() {
        let (phi, mut pseudo) = regression(400, 4, false);
        for v in pseudo.d.iter_mut().step_by(5) {
            *v += 5000.0;
        }
        let b = robust_init(&phi, &pseudo.d, &pseudo.weights, &LikelihoodKind::default());
        assert!((b[0] - 2.0).abs() < 0.3 && (b[1] + 1.0).abs() < 0.3, "{b:?}");
    }

    #[test]
    fn welsch_mass_sits_in_convex_region() {
        let (phi, pseudo) = regression(500, 5, false);
        let fit = fit_posterior(
            &phi,
            &pseudo,
            &LikelihoodSpec::default(),
            &PriorSpec::default_for(2),
            &SamplerConfig { warmup: 300, samples: 300, ..SamplerConfig::default() },
            1,
        )
        .unwrap();
        let m = fit.posterior_mean();
        let r = residuals(&phi, &pseudo.d, &m);
        let inside = r.iter().filter(|v| v.abs() < 1.34 / 2f64.sqrt()).count();
        assert!(inside as f64 >= 0.5 * r.len() as f64, "{inside}");
    }

    #[test]
    fn larger_eta_shrinks_posterior_variance() {
        let (phi, pseudo) = regression(300, 6, false);
        let var_at = |eta: f64| {
            let lik = LikelihoodSpec { eta, ..LikelihoodSpec::default() };
            let fit = fit_posterior(
                &phi,
                &pseudo,
                &lik,
                &PriorSpec::default_for(2),
                &SamplerConfig { warmup: 300, samples: 1000, ..SamplerConfig::default() },
                9,
            )
            .unwrap();
            summarize_beta(&fit.draws, 0.95).unwrap().iter().map(|s| s.sd * s.sd).sum::<f64>() / 2.0
        };
        let v: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|&e| var_at(e)).collect();
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
    }
}
