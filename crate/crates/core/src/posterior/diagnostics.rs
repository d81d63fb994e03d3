//! Convergence diagnostics: split-R̂, ESS, IAC, BFMI and divergences.

use serde::{Deserialize, Serialize};

use super::nuts::PosteriorDraws;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub r_hat: Vec<f64>,
    pub ess: Vec<f64>,
    pub iac: Vec<f64>,
    pub bfmi: Vec<f64>,
    pub divergences: usize,
}

impl ChainDiagnostics {
    pub fn max_r_hat(&self) -> f64 {
        self.r_hat.iter().copied().fold(f64::NAN, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().copied().fold(f64::NAN, f64::min)
    }

    pub fn min_bfmi(&self) -> f64 {
        self.bfmi.iter().copied().fold(f64::NAN, f64::min)
    }

    /// Coordinate-wise worst case over several runs of the same model.
    pub fn worst(runs: &[ChainDiagnostics]) -> Option<ChainDiagnostics> {
        let first = runs.first()?;
        let mut out = first.clone();
        for r in &runs[1..] {
            for (a, b) in out.r_hat.iter_mut().zip(&r.r_hat) {
                *a = a.max(*b);
            }
            for (a, b) in out.ess.iter_mut().zip(&r.ess) {
                *a = a.min(*b);
            }
            for (a, b) in out.iac.iter_mut().zip(&r.iac) {
                *a = a.max(*b);
            }
            out.bfmi.extend_from_slice(&r.bfmi);
            out.divergences += r.divergences;
        }
        Some(out)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn split_halves(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .collect()
}

/// Split-R̂ in the form √(1 + B/(n·W)), where W is the mean within-half
/// variance with denominator n and B/n the variance of half means. It is
/// never below one and equals one exactly when all half means coincide.
pub fn split_r_hat(chains: &[Vec<f64>]) -> f64 {
    let halves = split_halves(chains);
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, m)| h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
        .sum::<f64>()
        / halves.len() as f64;
    let grand = mean(&means);
    let b_over_n = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() as f64 - 1.0);
    if w <= 0.0 {
        return if b_over_n <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (1.0 + b_over_n / w).sqrt()
}

fn autocovariance(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size over split halves using Geyer's initial monotone
/// sequence; capped at the number of draws.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let halves = split_halves(chains);
    let m = halves.len();
    let n = halves[0].len();
    let total = (m * n) as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let acov0: Vec<f64> = halves.iter().zip(&means).map(|(h, mu)| autocovariance(h, *mu, 0)).collect();
    let nf = n as f64;
    let w = mean(&acov0) * nf / (nf - 1.0);
    let grand = mean(&means);
    let b_over_n = if m > 1 {
        means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0)
    } else {
        0.0
    };
    let var_plus = w * (nf - 1.0) / nf + b_over_n;
    if var_plus <= 0.0 {
        return total;
    }
    let rho = |t: usize| -> f64 {
        let acov_t = mean(
            &halves
                .iter()
                .zip(&means)
                .map(|(h, mu)| autocovariance(h, *mu, t))
                .collect::<Vec<_>>(),
        );
        1.0 - (w - acov_t) / var_plus
    };
    let mut pair_sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut p = rho(t) + rho(t + 1);
        if p < 0.0 {
            break;
        }
        if p > prev {
            p = prev;
        }
        pair_sum += p;
        prev = p;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * pair_sum).max(1.0 / total.log10().max(1.0));
    (total / tau).min(total)
}

/// Var[ΔE] / Var[E] with population variances.
pub fn bfmi(energy: &[f64]) -> f64 {
    let de: Vec<f64> = energy.windows(2).map(|w| w[1] - w[0]).collect();
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    var(&de) / var(energy)
}

pub fn diagnose(draws: &PosteriorDraws) -> Result<ChainDiagnostics> {
    if draws.n_chains() < 2 {
        return Err(Error::invalid("split-R̂ needs at least two chains"));
    }
    let s = draws.n_samples();
    if s < 10 || draws.chains.iter().any(|c| c.energy.len() != s) {
        return Err(Error::invalid(format!("need at least 10 equal-length draws per chain, got {s}")));
    }
    let mut r_hat = Vec::with_capacity(draws.dim);
    let mut ess = Vec::with_capacity(draws.dim);
    let mut iac = Vec::with_capacity(draws.dim);
    let total = draws.total_draws() as f64;
    for j in 0..draws.dim {
        let trace = draws.coordinate(j);
        r_hat.push(split_r_hat(&trace));
        let e = effective_sample_size(&trace);
        ess.push(e);
        iac.push(total / e);
    }
    Ok(ChainDiagnostics {
        r_hat,
        ess,
        iac,
        bfmi: draws.chains.iter().map(|c| bfmi(&c.energy)).collect(),
        divergences: draws.divergence_count(),
    })
}
