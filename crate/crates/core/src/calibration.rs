//! Learning-rate calibration for the generalised posterior.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::DesignMatrix;
use crate::data::CausalDataset;
use crate::error::{Error, Result, StageExt};
use crate::losses::{mad, LossKind, MAD_CONSISTENCY};
use crate::metrics::winkler_score;
use crate::modular::bayesian_bootstrap_weights;
use crate::pipeline::{self, FitConfig, Prepared};
use crate::posterior::{
    robust_init, weighted_least_squares, IntervalSummary, LikelihoodKind, LikelihoodSpec, PosteriorFit, PriorSpec,
    SamplerConfig,
};
use crate::pseudo::PseudoOutcomes;
use crate::rng;

pub const DEFAULT_RIDGE: f64 = 1e-2;
/// Eigenvalues of the stabilised Î are clipped to this fraction of tr(Î).
pub const EIG_FLOOR: f64 = 1e-3;
pub const DEFAULT_LLB_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const DEFAULT_RBCI_GRID: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichMatrices {
    /// Stabilised Î.
    pub i_hat: DMatrix<f64>,
    pub j_hat: DMatrix<f64>,
    /// Î before ridge and clipping.
    pub i_raw: DMatrix<f64>,
    pub ridge_lambda: f64,
    pub min_eig_raw: f64,
}

impl SandwichMatrices {
    /// Raw Î had a non-positive eigenvalue.
    pub fn raw_indefinite(&self) -> bool {
        self.min_eig_raw <= 0.0
    }

    fn inverse(&self) -> Result<DMatrix<f64>> {
        self.i_hat
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::numeric("stabilised I-hat is not positive definite"))
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for a in 0..p {
        for b in (a + 1)..p {
            let v = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
}

/// Plug-in Î = n⁻¹Σ wψ′φφᵀ and Ĵ = n⁻¹Σ w²ψ²φφᵀ at the given residuals, then
/// ridge Î ← Î + λ·tr(Î)·I/p and eigenvalue clipping at `EIG_FLOOR`·tr(Î).
/// `sigma` is the scale for Gaussian / Student-t likelihoods and is ignored otherwise.
pub fn estimate_sandwich(
    residuals: &[f64],
    phi: &DesignMatrix,
    kind: &LikelihoodKind,
    sigma: f64,
    weights: &[f64],
    ridge_lambda: f64,
) -> Result<SandwichMatrices> {
    let n = phi.nrows();
    let p = phi.ncols();
    if residuals.len() != n || weights.len() != n {
        return Err(Error::DataShape("residual, weight and design lengths differ".into()));
    }
    if n == 0 {
        return Err(Error::invalid("no residuals"));
    }
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::invalid(format!("ridge lambda must be non-negative, got {ridge_lambda}")));
    }
    let mut i_raw = DMatrix::<f64>::zeros(p, p);
    let mut j_hat = DMatrix::<f64>::zeros(p, p);
    for k in 0..n {
        let (_, psi, psi_prime) = kind.rho_psi(residuals[k], sigma);
        let w = weights[k];
        let row = phi.row(k);
        for a in 0..p {
            for b in a..p {
                let f = row[a] * row[b];
                i_raw[(a, b)] += w * psi_prime * f;
                j_hat[(a, b)] += w * w * psi * psi * f;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            i_raw[(a, b)] = i_raw[(b, a)];
            j_hat[(a, b)] = j_hat[(b, a)];
        }
    }
    i_raw /= n as f64;
    j_hat /= n as f64;

    let min_eig_raw = SymmetricEigen::new(i_raw.clone()).eigenvalues.min();
    let mut i_hat = i_raw.clone();
    let tr = i_hat.trace();
    for a in 0..p {
        i_hat[(a, a)] += ridge_lambda * tr / p as f64;
    }
    let tr = i_hat.trace();
    if !(tr > 0.0) {
        return Err(Error::degenerate(format!(
            "tr(I-hat) = {tr:.3e} after ridge; the curvature is not positive, which points to severe \
             contamination or an unidentified basis"
        )));
    }
    let eig = SymmetricEigen::new(i_hat.clone());
    if eig.eigenvalues.min() < EIG_FLOOR * tr {
        // Clipping raises the trace, so solve f = ε·tr(clipped) for the floor.
        let mut floor = EIG_FLOOR * tr;
        for _ in 0..=p {
            let kept: f64 = eig.eigenvalues.iter().filter(|&&v| v > floor).sum();
            let k = eig.eigenvalues.iter().filter(|&&v| v <= floor).count() as f64;
            let next = EIG_FLOOR * kept / (1.0 - EIG_FLOOR * k);
            if (next - floor).abs() <= 1e-15 * floor.abs() {
                break;
            }
            floor = next;
        }
        let clipped = eig.eigenvalues.map(|v| v.max(floor));
        i_hat = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        symmetrize(&mut i_hat);
    }
    Ok(SandwichMatrices {
        i_hat,
        j_hat,
        i_raw,
        ridge_lambda,
        min_eig_raw,
    })
}

/// tr(Î⁻¹) / tr(Î⁻¹ĴÎ⁻¹).
pub fn eta_trace(m: &SandwichMatrices) -> Result<f64> {
    let inv = m.inverse()?;
    let num = inv.trace();
    let den = (&inv * &m.j_hat * &inv).trace();
    ratio(num, den)
}

/// (aᵀÎ⁻¹a) / (aᵀÎ⁻¹ĴÎ⁻¹a).
pub fn eta_functional(m: &SandwichMatrices, a: &[f64]) -> Result<f64> {
    if a.len() != m.i_hat.nrows() {
        return Err(Error::DataShape(format!(
            "functional has {} entries, expected {}",
            a.len(),
            m.i_hat.nrows()
        )));
    }
    if a.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("functional vector is zero"));
    }
    let inv = m.inverse()?;
    let u = &inv * DVector::from_column_slice(a);
    let num = DVector::from_column_slice(a).dot(&u);
    let den = u.dot(&(&m.j_hat * &u));
    ratio(num, den)
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if !(den > 0.0) || !num.is_finite() {
        return Err(Error::degenerate(format!(
            "sandwich variance {den:.3e} is not positive; eta is undefined"
        )));
    }
    let eta = num / den;
    if eta > 0.0 && eta.is_finite() {
        Ok(eta)
    } else {
        Err(Error::numeric(format!("eta estimate {eta} is not a positive number")))
    }
}

/// Which sandwich ratio sets η.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum EtaTarget {
    Trace,
    Functional { a: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: String,
    pub eta: f64,
    pub min_eig_raw: Option<f64>,
    pub raw_indefinite: bool,
    pub ridge_lambda: Option<f64>,
    /// η for each coefficient taken as its own functional.
    pub eta_per_coefficient: Vec<f64>,
    /// Grid scores for LLB (|posterior var − bootstrap var|) or RBCI (mean Winkler score).
    pub grid: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct EtaCalibration {
    pub eta: f64,
    pub sandwich: SandwichMatrices,
    pub pilot: PosteriorFit,
    pub refit: PosteriorFit,
    pub report: CalibrationReport,
}

/// Posterior mean of σ (geometric) when the likelihood infers it.
fn fitted_sigma(fit: &PosteriorFit) -> f64 {
    match fit.likelihood {
        LikelihoodKind::Gaussian { sigma: Some(s) } | LikelihoodKind::StudentT { sigma: Some(s), .. } => s,
        k if k.infers_sigma() => {
            let d = fit.draws.dim;
            let mut acc = 0.0;
            let mut n = 0.0;
            for c in 0..fit.draws.n_chains() {
                for s in 0..fit.draws.n_samples() {
                    acc += fit.draws.draw(c, s)[d - 1];
                    n += 1.0;
                }
            }
            (acc / n).exp()
        }
        _ => 1.0,
    }
}

/// Pilot at η = 1, sandwich at the pilot posterior mean, η̂, refit at η̂.
pub fn calibrate_posterior(
    phi: &DesignMatrix,
    pseudo: &PseudoOutcomes,
    lik: &LikelihoodSpec,
    prior: &PriorSpec,
    sampler: &SamplerConfig,
    seed: u64,
    target: &EtaTarget,
    ridge_lambda: f64,
) -> Result<EtaCalibration> {
    let pilot_spec = LikelihoodSpec { eta: 1.0, ..*lik };
    let pilot = crate::posterior::fit_posterior(phi, pseudo, &pilot_spec, prior, sampler, rng::derive_seed(seed, &[rng::tag("pilot")]))
        .stage("eta pilot")?;
    let beta = pilot.posterior_mean();
    let fitted = phi.apply(&beta);
    let resid: Vec<f64> = pseudo.d.iter().zip(&fitted).map(|(d, f)| d - f).collect();
    let sandwich = estimate_sandwich(&resid, phi, &pilot.likelihood, fitted_sigma(&pilot), &pseudo.weights, ridge_lambda)?;
    let (eta, method) = match target {
        EtaTarget::Trace => (eta_trace(&sandwich)?, "trace"),
        EtaTarget::Functional { a } => (eta_functional(&sandwich, a)?, "functional"),
    };
    let eta_per_coefficient = (0..phi.ncols())
        .map(|j| {
            let mut a = vec![0.0; phi.ncols()];
            a[j] = 1.0;
            eta_functional(&sandwich, &a).unwrap_or(f64::NAN)
        })
        .collect();
    let refit_spec = LikelihoodSpec { eta, ..*lik };
    let refit = crate::posterior::fit_posterior(phi, pseudo, &refit_spec, prior, sampler, seed).stage("eta refit")?;
    let report = CalibrationReport {
        method: method.into(),
        eta,
        min_eig_raw: Some(sandwich.min_eig_raw),
        raw_indefinite: sandwich.raw_indefinite(),
        ridge_lambda: Some(ridge_lambda),
        eta_per_coefficient,
        grid: Vec::new(),
    };
    Ok(EtaCalibration {
        eta,
        sandwich,
        pilot,
        refit,
        report,
    })
}

/// Dataset-level pilot/refit calibration through the full pipeline.
pub fn calibrate_eta(ds: &CausalDataset, cfg: &FitConfig, target: &EtaTarget) -> Result<EtaCalibration> {
    let prep = pipeline::prepare(ds, cfg, None)?;
    let lik = cfg.likelihood_spec();
    let prior = cfg.prior_for(prep.phi.ncols());
    calibrate_posterior(&prep.phi, &prep.pseudo, &lik, &prior, &cfg.sampler, cfg.phase3_seed(0), target, cfg.ridge_lambda)
}

/// Weighted Huber M-estimate of D on Φ by IRLS, δ in robust-SD units of D.
pub fn huber_regression(phi: &DesignMatrix, d: &[f64], w: &[f64], delta: f64) -> Result<Vec<f64>> {
    let scale = mad(d, false)? / MAD_CONSISTENCY;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let cut = delta * scale;
    let mut beta = robust_init(phi, d, w, &LikelihoodKind::Gaussian { sigma: Some(1.0) });
    for _ in 0..200 {
        let fitted = phi.apply(&beta);
        let ww: Vec<f64> = d
            .iter()
            .zip(&fitted)
            .zip(w)
            .map(|((y, f), wi)| wi * (cut / (y - f).abs().max(1e-300)).min(1.0))
            .collect();
        let next = weighted_least_squares(phi, d, &ww).ok_or_else(|| Error::numeric("singular Huber IRLS system"))?;
        let step: f64 = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).sum();
        beta = next;
        if step < 1e-10 * (1.0 + beta.iter().map(|b| b.abs()).sum::<f64>()) {
            break;
        }
    }
    Ok(beta)
}

/// δ of the Huber point fit used by the bootstrap selectors.
fn bootstrap_delta(cfg: &FitConfig) -> f64 {
    match cfg.severity.loss() {
        LossKind::Huber { delta } => delta,
        _ => 1.345,
    }
}

/// ATE of the robust point pipeline under `replicates` Bayesian-bootstrap reweightings.
pub fn bootstrap_point_ates(ds: &CausalDataset, cfg: &FitConfig, replicates: usize, seed: u64) -> Result<Vec<f64>> {
    if replicates < 2 {
        return Err(Error::invalid("need at least 2 bootstrap replicates"));
    }
    let delta = bootstrap_delta(cfg);
    (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, &[rng::tag("llb"), b as u64]);
            let w = bayesian_bootstrap_weights(ds.len(), &mut r);
            let prep = pipeline::prepare(ds, cfg, Some(&w))?;
            let combined: Vec<f64> = w.iter().zip(&prep.pseudo.weights).map(|(a, b)| a * b).collect();
            let beta = huber_regression(&prep.phi, &prep.pseudo.d, &combined, delta)?;
            Ok(dot(&pipeline::ate_contrast(&prep.phi), &beta))
        })
        .collect::<Vec<Result<f64>>>()
        .into_iter()
        .enumerate()
        .map(|(b, r)| r.stage(format!("bootstrap replicate {b}")))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("empty calibration grid"));
    }
    if grid.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(Error::invalid("calibration grid values must be positive"));
    }
    Ok(())
}

fn ate_draws(fit: &PosteriorFit, a: &[f64]) -> Vec<f64> {
    fit.draws.beta_draws().map(|b| dot(a, b)).collect()
}

fn fits_on_grid(prep: &Prepared, cfg: &FitConfig, grid: &[f64]) -> Result<Vec<PosteriorFit>> {
    grid.par_iter()
        .map(|&eta| pipeline::posterior_at(prep, cfg, eta, cfg.phase3_seed(0)))
        .collect::<Vec<Result<PosteriorFit>>>()
        .into_iter()
        .zip(grid)
        .map(|(r, eta)| r.stage(format!("grid eta {eta}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlbResult {
    pub eta: f64,
    pub bootstrap_var: f64,
    /// (η, posterior variance of the ATE) per grid value.
    pub posterior_var: Vec<(f64, f64)>,
}

/// η whose posterior ATE variance is closest to the bootstrap variance of the point pipeline.
pub fn calibrate_eta_llb_prepared(
    ds: &CausalDataset,
    cfg: &FitConfig,
    prep: &Prepared,
    replicates: usize,
    grid: &[f64],
) -> Result<LlbResult> {
    check_grid(grid)?;
    if grid.len() == 1 {
        return Ok(LlbResult {
            eta: grid[0],
            bootstrap_var: f64::NAN,
            posterior_var: Vec::new(),
        });
    }
    let boot = bootstrap_point_ates(ds, cfg, replicates, rng::derive_seed(cfg.seed, &[rng::tag("llb")]))?;
    let bootstrap_var = crate::numeric::variance(&boot);
    if !(bootstrap_var > 0.0) {
        return Err(Error::degenerate("bootstrap replicates have zero variance"));
    }
    let a = pipeline::ate_contrast(&prep.phi);
    let fits = fits_on_grid(prep, cfg, grid)?;
    let posterior_var: Vec<(f64, f64)> = grid
        .iter()
        .zip(&fits)
        .map(|(&eta, f)| (eta, crate::numeric::variance(&ate_draws(f, &a))))
        .collect();
    let eta = posterior_var
        .iter()
        .min_by(|x, y| (x.1 - bootstrap_var).abs().total_cmp(&(y.1 - bootstrap_var).abs()))
        .map(|x| x.0)
        .expect("non-empty grid");
    Ok(LlbResult {
        eta,
        bootstrap_var,
        posterior_var,
    })
}

pub fn calibrate_eta_llb(ds: &CausalDataset, cfg: &FitConfig, replicates: usize, grid: &[f64]) -> Result<LlbResult> {
    let prep = pipeline::prepare(ds, cfg, None)?;
    calibrate_eta_llb_prepared(ds, cfg, &prep, replicates, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbciResult {
    pub omega: f64,
    pub interval: IntervalSummary,
    /// (ω, mean Winkler score against the bootstrap pseudo-truths).
    pub scores: Vec<(f64, f64)>,
}

/// ω minimising the mean Winkler score of the ATE interval over bootstrap pseudo-truths.
pub fn rbci_omega_prepared(
    ds: &CausalDataset,
    cfg: &FitConfig,
    prep: &Prepared,
    replicates: usize,
    grid: &[f64],
) -> Result<RbciResult> {
    check_grid(grid)?;
    let a = pipeline::ate_contrast(&prep.phi);
    let fits = fits_on_grid(prep, cfg, grid)?;
    let intervals: Vec<IntervalSummary> = fits
        .iter()
        .map(|f| IntervalSummary::from_sample(&ate_draws(f, &a), cfg.level))
        .collect();
    if grid.len() == 1 {
        return Ok(RbciResult {
            omega: grid[0],
            interval: intervals[0],
            scores: Vec::new(),
        });
    }
    let truths = bootstrap_point_ates(ds, cfg, replicates, rng::derive_seed(cfg.seed, &[rng::tag("rbci")]))?;
    let alpha = 1.0 - cfg.level;
    let mut scores = Vec::with_capacity(grid.len());
    for (&omega, iv) in grid.iter().zip(&intervals) {
        let mut s = 0.0;
        for &t in &truths {
            s += winkler_score(iv.lo, iv.hi, t, alpha)?;
        }
        scores.push((omega, s / truths.len() as f64));
    }
    let best = (0..grid.len())
        .min_by(|&i, &j| scores[i].1.total_cmp(&scores[j].1))
        .expect("non-empty grid");
    Ok(RbciResult {
        omega: grid[best],
        interval: intervals[best],
        scores,
    })
}

pub fn rbci_omega(ds: &CausalDataset, cfg: &FitConfig, replicates: usize, grid: &[f64]) -> Result<RbciResult> {
    let prep = pipeline::prepare(ds, cfg, None)?;
    rbci_omega_prepared(ds, cfg, &prep, replicates, grid)
}
