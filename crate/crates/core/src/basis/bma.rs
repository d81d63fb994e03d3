use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use super::{evaluate_basis, BasisSpec};
use crate::data::Covariates;
use crate::error::{Error, Result, StageExt};
use crate::losses::LossKind;
use crate::posterior::{
    fit_posterior, CateSummary, IntervalSummary, LikelihoodKind, LikelihoodSpec, PosteriorFit, PriorSpec,
    SamplerConfig,
};
use crate::pseudo::PseudoOutcomes;
use crate::rng;

#[derive(Debug, Clone)]
pub struct BmaResult {
    pub candidates: Vec<f64>,
    pub specs: Vec<BasisSpec>,
    /// Softmax of minus the mean in-sample Welsch loss.
    pub weights: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub fits: Vec<PosteriorFit>,
    /// Resampled (candidate, β draw) pairs. Coefficients of different
    /// thresholds are not comparable, so each draw keeps its basis.
    pub pooled: Vec<(usize, Vec<f64>)>,
}

impl BmaResult {
    /// Weighted average of each candidate's posterior-mean τ(x).
    pub fn cate_mean(&self, x: &Covariates) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.nrows()];
        for ((spec, fit), w) in self.specs.iter().zip(&self.fits).zip(&self.weights) {
            let tau = evaluate_basis(spec, x)?.apply(&fit.posterior_mean());
            for (o, t) in out.iter_mut().zip(tau) {
                *o += w * t;
            }
        }
        Ok(out)
    }

    /// Mixture summaries of τ(x) from the pooled draws.
    pub fn pooled_cate(&self, x: &Covariates, level: f64) -> Result<CateSummary> {
        let rows: Vec<Vec<Vec<f64>>> = self
            .specs
            .iter()
            .map(|s| (0..x.nrows()).map(|i| s.row(x.row(i))).collect())
            .collect();
        let mut out = CateSummary {
            tau_mean: Vec::with_capacity(x.nrows()),
            tau_lo: Vec::with_capacity(x.nrows()),
            tau_hi: Vec::with_capacity(x.nrows()),
        };
        for i in 0..x.nrows() {
            let vals: Vec<f64> = self
                .pooled
                .iter()
                .map(|(k, b)| rows[*k][i].iter().zip(b).map(|(p, v)| p * v).sum())
                .collect();
            let s = IntervalSummary::from_sample(&vals, level);
            out.tau_mean.push(s.mean);
            out.tau_lo.push(s.lo);
            out.tau_hi.push(s.hi);
        }
        Ok(out)
    }
}

/// Fit `[1, 1{|x_f| > c}]` for every candidate c under a Welsch likelihood and
/// average the fits with weights ∝ exp(−mean Welsch loss at the posterior mean).
#[allow(clippy::too_many_arguments)]
pub fn bma_over_thresholds(
    pseudo: &PseudoOutcomes,
    x: &Covariates,
    feature: usize,
    candidates: &[f64],
    welsch_c: f64,
    prior: Option<PriorSpec>,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<BmaResult> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate thresholds"));
    }
    if feature >= x.ncols() {
        return Err(Error::invalid(format!("feature x{feature} out of range")));
    }
    let lik = LikelihoodSpec {
        kind: LikelihoodKind::Welsch { c: welsch_c },
        ..Default::default()
    };
    let loss = LossKind::Welsch { c: welsch_c };
    loss.validate()?;
    let specs: Vec<BasisSpec> = candidates.iter().map(|&c| BasisSpec::tail(feature, c)).collect();
    // A shared seed keeps identical candidates' fits identical.
    let fits: Vec<(PosteriorFit, f64)> = specs
        .par_iter()
        .map(|spec| {
            let phi = evaluate_basis(spec, x)?;
            let prior = prior.unwrap_or_else(|| PriorSpec::default_for(phi.ncols()));
            let fit = fit_posterior(&phi, pseudo, &lik, &prior, sampler, seed)?;
            let fitted = phi.apply(&fit.posterior_mean());
            let wsum: f64 = pseudo.weights.iter().sum();
            let total: f64 = pseudo
                .d
                .iter()
                .zip(&fitted)
                .zip(&pseudo.weights)
                .map(|((d, f), w)| w * loss.rho(d - f))
                .sum();
            Ok((fit, total / wsum))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .zip(candidates)
        .map(|(r, c)| r.stage(format!("threshold {c}")))
        .collect::<Result<_>>()?;
    let mean_loss: Vec<f64> = fits.iter().map(|f| f.1).collect();
    let best = mean_loss.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = mean_loss.iter().map(|l| (-(l - best)).exp()).collect();
    let z: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|r| r / z).collect();
    let fits: Vec<PosteriorFit> = fits.into_iter().map(|f| f.0).collect();

    let per_fit = fits[0].draws.total_draws();
    let mut r = rng::stream(seed, &[rng::tag("bma-pool")]);
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::numeric(format!("BMA weights: {e}")))?;
    let draws: Vec<Vec<&[f64]>> = fits.iter().map(|f| f.draws.beta_draws().collect()).collect();
    let pooled = (0..per_fit)
        .map(|_| {
            let k = pick.sample(&mut r);
            let s = r.random_range(0..draws[k].len());
            (k, draws[k][s].to_vec())
        })
        .collect();
    Ok(BmaResult {
        candidates: candidates.to_vec(),
        specs,
        weights,
        mean_loss,
        fits,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpKind, DgpSpec};
    use crate::metrics::pehe;

    fn quick() -> SamplerConfig {
        SamplerConfig {
            warmup: 200,
            samples: 300,
            ..Default::default()
        }
    }

    fn oracle_pseudo(g: &crate::dgp::GeneratedData, seed: u64) -> PseudoOutcomes {
        use rand_distr::StandardNormal;
        let mut r = rng::stream(seed, &[]);
        let d: Vec<f64> = g.tau_true.iter().map(|t| t + 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
        let n = d.len();
        PseudoOutcomes {
            d,
            weights: vec![1.0; n],
            source_arm: g.dataset.w.clone(),
        }
    }

    #[test]
    fn identical_candidates_split_evenly() {
        let g = generate(&DgpSpec::new(DgpKind::TailHetero, 600, 0.0, 41)).unwrap();
        let p = oracle_pseudo(&g, 1);
        let r = bma_over_thresholds(&p, &g.dataset.x, 0, &[1.96, 1.96], 1.34, None, &quick(), 5).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn weights_form_a_simplex_and_pehe_is_bracketed() {
        let g = generate(&DgpSpec::new(DgpKind::TailHetero, 1500, 0.0, 42)).unwrap();
        let p = oracle_pseudo(&g, 2);
        let cands = [1.0, 1.25, 1.5, 1.75, 1.96, 2.25, 2.5, 3.0];
        let r = bma_over_thresholds(&p, &g.dataset.x, 0, &cands, 1.34, None, &quick(), 6).unwrap();
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.weights.iter().all(|w| *w > 0.0));
        let single: Vec<f64> = r
            .specs
            .iter()
            .zip(&r.fits)
            .map(|(s, f)| pehe(&evaluate_basis(s, &g.dataset.x).unwrap().apply(&f.posterior_mean()), &g.tau_true).unwrap())
            .collect();
        let bma = pehe(&r.cate_mean(&g.dataset.x).unwrap(), &g.tau_true).unwrap();
        let lo = single.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = single.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo < bma && bma < hi, "{lo} < {bma} < {hi}");
        let pooled = r.pooled_cate(&g.dataset.x, 0.95).unwrap();
        assert_eq!(pooled.tau_mean.len(), 1500);
    }
}
