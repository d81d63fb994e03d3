//! End-to-end estimation: cross-fit nuisances, DR pseudo-outcomes, basis
//! design, then the generalised posterior (optionally calibrated or pooled).

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::basis::{evaluate_basis, BasisSpec, DesignMatrix};
use crate::calibration::{self, CalibrationReport, EtaTarget, DEFAULT_LLB_GRID, DEFAULT_RBCI_GRID, DEFAULT_RIDGE};
use crate::data::{CausalDataset, Covariates};
use crate::error::{Error, Result, StageExt};
use crate::modular::{self, ModularConfig, PoolingSummary};
use crate::nuisance::{cross_fit, BoosterOverrides, NuisanceConfig, NuisanceFits, SeverityPreset};
use crate::posterior::{
    fit_posterior, summarize_beta, summarize_cate, summarize_contrast, CateSummary, ChainDiagnostics,
    IntervalSummary, LikelihoodKind, LikelihoodSpec, PosteriorDraws, PosteriorFit, PriorSpec, SamplerConfig,
};
use crate::pseudo::{dr_pseudo_outcomes, overlap_weights, PseudoOutcomes};
use crate::rng;
use crate::tail::{normalize_extremes, propensity_warnings, PropensityCheck, Warning, WarningCode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum EtaMethod {
    /// η fixed at the likelihood's value.
    Off,
    Trace,
    Functional {
        a: Vec<f64>,
    },
    Llb {
        #[serde(default = "llb_grid")]
        grid: Vec<f64>,
        #[serde(default = "default_replicates")]
        replicates: usize,
    },
    Rbci {
        #[serde(default = "rbci_grid")]
        grid: Vec<f64>,
        #[serde(default = "default_replicates")]
        replicates: usize,
    },
}

fn llb_grid() -> Vec<f64> {
    DEFAULT_LLB_GRID.to_vec()
}

fn rbci_grid() -> Vec<f64> {
    DEFAULT_RBCI_GRID.to_vec()
}

fn default_replicates() -> usize {
    50
}

impl EtaMethod {
    pub fn llb_default() -> Self {
        EtaMethod::Llb {
            grid: DEFAULT_LLB_GRID.to_vec(),
            replicates: 50,
        }
    }

    pub fn rbci_default() -> Self {
        EtaMethod::Rbci {
            grid: DEFAULT_RBCI_GRID.to_vec(),
            replicates: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremesRescale {
    pub threshold: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub severity: SeverityPreset,
    pub basis: BasisSpec,
    pub likelihood: LikelihoodSpec,
    /// `None` picks Student-t(3) with the p-dependent default scale.
    pub prior: Option<PriorSpec>,
    pub k_folds: usize,
    /// `None` enables overlap weights automatically when π̂ nears the boundary.
    pub use_overlap: Option<bool>,
    pub normalize_y_for_nuisance: bool,
    pub eta: EtaMethod,
    pub ridge_lambda: f64,
    pub modular: Option<ModularConfig>,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub level: f64,
    /// Replace the Welsch c with the severity preset's value.
    pub welsch_from_severity: bool,
    /// Legacy tail rescaling of pseudo-outcomes; off unless both values are given.
    pub normalize_extremes: Option<ExtremesRescale>,
    pub booster: BoosterOverrides,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            severity: SeverityPreset::None,
            basis: BasisSpec::intercept(),
            likelihood: LikelihoodSpec::default(),
            prior: None,
            k_folds: 2,
            use_overlap: None,
            normalize_y_for_nuisance: false,
            eta: EtaMethod::Off,
            ridge_lambda: DEFAULT_RIDGE,
            modular: None,
            sampler: SamplerConfig::default(),
            seed: 0,
            level: 0.95,
            welsch_from_severity: false,
            normalize_extremes: None,
            booster: BoosterOverrides::default(),
        }
    }
}

impl FitConfig {
    pub fn with_severity(severity: SeverityPreset) -> Self {
        Self {
            severity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.likelihood.validate()?;
        self.sampler.validate()?;
        if let Some(p) = &self.prior {
            p.validate()?;
        }
        if self.k_folds < 2 {
            return Err(Error::invalid("k_folds must be at least 2"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::invalid("ridge_lambda must be non-negative"));
        }
        if let Some(m) = &self.modular {
            if m.m < 2 {
                return Err(Error::invalid("modular pooling needs m >= 2"));
            }
        }
        Ok(())
    }

    pub fn likelihood_spec(&self) -> LikelihoodSpec {
        let mut lik = self.likelihood;
        if self.welsch_from_severity {
            if let LikelihoodKind::Welsch { .. } = lik.kind {
                lik.kind = LikelihoodKind::Welsch {
                    c: self.severity.welsch_c(),
                };
            }
        }
        lik
    }

    pub fn prior_for(&self, p: usize) -> PriorSpec {
        self.prior.unwrap_or_else(|| PriorSpec::default_for(p))
    }

    pub fn nuisance_config(&self) -> NuisanceConfig {
        let base = NuisanceConfig::from_severity(self.severity);
        NuisanceConfig {
            k_folds: self.k_folds,
            standardize_y: self.normalize_y_for_nuisance,
            outcome: self.booster.apply(base.outcome),
            ..base
        }
    }

    pub(crate) fn nuisance_seed(&self) -> u64 {
        rng::derive_seed(self.seed, &[rng::tag("nuisance")])
    }

    pub(crate) fn phase3_seed(&self, m: u64) -> u64 {
        rng::derive_seed(self.seed, &[rng::tag("phase3"), m])
    }
}

/// Phase 1 and 2 output ready for the posterior.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub nuisance: NuisanceFits,
    pub pseudo: PseudoOutcomes,
    pub phi: DesignMatrix,
    pub overlap: bool,
    pub propensity: PropensityCheck,
    pub warnings: Vec<Warning>,
}

/// Column means of Φ: the contrast whose value is the sample-average effect.
pub fn ate_contrast(phi: &DesignMatrix) -> Vec<f64> {
    let n = phi.nrows() as f64;
    let mut a = vec![0.0; phi.ncols()];
    for i in 0..phi.nrows() {
        for (acc, v) in a.iter_mut().zip(phi.row(i)) {
            *acc += v;
        }
    }
    a.iter_mut().for_each(|v| *v /= n);
    a
}

/// Cross-fit nuisances (optionally reweighted), build pseudo-outcomes and Φ.
pub fn prepare(ds: &CausalDataset, cfg: &FitConfig, sample_weights: Option<&[f64]>) -> Result<Prepared> {
    cfg.validate()?;
    ds.validate()?;
    cfg.basis.check_dim(ds.dim())?;
    let nuisance = cross_fit(ds, &cfg.nuisance_config(), cfg.nuisance_seed(), sample_weights).stage("nuisance")?;
    let propensity = propensity_warnings(&nuisance.pi_hat);
    let mut warnings = propensity.warnings.clone();
    let overlap = match cfg.use_overlap {
        Some(v) => v,
        None => {
            if propensity.auto_overlap {
                warnings.push(Warning::new(
                    WarningCode::Overlap,
                    "propensities outside [0.02, 0.98]; overlap weights enabled automatically \
                     (the estimand becomes the overlap-weighted effect)",
                ));
            }
            propensity.auto_overlap
        }
    };
    let mut pseudo = dr_pseudo_outcomes(ds, &nuisance).stage("pseudo-outcomes")?;
    if overlap {
        pseudo = pseudo.with_weights(overlap_weights(&nuisance.pi_hat)?)?;
    }
    if let Some(ne) = cfg.normalize_extremes {
        let (p, w) = normalize_extremes(&pseudo, ne.threshold, ne.alpha)?;
        pseudo = p;
        warnings.push(w);
    }
    let phi = evaluate_basis(&cfg.basis, &ds.x)?;
    Ok(Prepared {
        nuisance,
        pseudo,
        phi,
        overlap,
        propensity,
        warnings,
    })
}

/// Phase-3 posterior at a fixed η.
pub fn posterior_at(prep: &Prepared, cfg: &FitConfig, eta: f64, seed: u64) -> Result<PosteriorFit> {
    let lik = LikelihoodSpec {
        eta,
        ..cfg.likelihood_spec()
    };
    let prior = cfg.prior_for(prep.phi.ncols());
    fit_posterior(&prep.phi, &prep.pseudo, &lik, &prior, &cfg.sampler, seed)
}

/// Phase 3 with per-fit η handling: fixed, trace or functional. LLB and RBCI
/// are resolved to a fixed η by the caller.
pub(crate) fn phase3(
    prep: &Prepared,
    cfg: &FitConfig,
    fixed_eta: Option<f64>,
    seed: u64,
) -> Result<(PosteriorFit, Option<CalibrationReport>)> {
    let target = match (&cfg.eta, fixed_eta) {
        (_, Some(eta)) => return Ok((posterior_at(prep, cfg, eta, seed)?, None)),
        (EtaMethod::Trace, None) => EtaTarget::Trace,
        (EtaMethod::Functional { a }, None) => EtaTarget::Functional { a: a.clone() },
        _ => return Ok((posterior_at(prep, cfg, cfg.likelihood.eta, seed)?, None)),
    };
    let lik = cfg.likelihood_spec();
    let prior = cfg.prior_for(prep.phi.ncols());
    let cal = calibration::calibrate_posterior(&prep.phi, &prep.pseudo, &lik, &prior, &cfg.sampler, seed, &target, cfg.ridge_lambda)?;
    Ok((cal.refit, Some(cal.report)))
}

/// η chosen by a dataset-level selector, if configured.
pub(crate) fn selected_eta(
    ds: &CausalDataset,
    cfg: &FitConfig,
    prep: &Prepared,
) -> Result<(Option<f64>, Option<CalibrationReport>)> {
    match &cfg.eta {
        EtaMethod::Llb { grid, replicates } => {
            let r = calibration::calibrate_eta_llb_prepared(ds, cfg, prep, *replicates, grid).stage("LLB calibration")?;
            Ok((
                Some(r.eta),
                Some(CalibrationReport {
                    method: "llb".into(),
                    eta: r.eta,
                    min_eig_raw: None,
                    raw_indefinite: false,
                    ridge_lambda: None,
                    eta_per_coefficient: Vec::new(),
                    grid: r.posterior_var.iter().map(|(e, v)| (*e, (v - r.bootstrap_var).abs())).collect(),
                }),
            ))
        }
        EtaMethod::Rbci { grid, replicates } => {
            let r = calibration::rbci_omega_prepared(ds, cfg, prep, *replicates, grid).stage("RBCI calibration")?;
            Ok((
                Some(r.omega),
                Some(CalibrationReport {
                    method: "rbci".into(),
                    eta: r.omega,
                    min_eig_raw: None,
                    raw_indefinite: false,
                    ridge_lambda: None,
                    eta_per_coefficient: Vec::new(),
                    grid: r.scores.clone(),
                }),
            ))
        }
        _ => Ok((None, None)),
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub ate: IntervalSummary,
    pub beta: Vec<IntervalSummary>,
    pub basis: BasisSpec,
    /// All draws; for pooled fits the concatenation over bootstrap replicates.
    pub draws: PosteriorDraws,
    pub diagnostics: Option<ChainDiagnostics>,
    pub eta: f64,
    pub likelihood: LikelihoodKind,
    pub calibration: Option<CalibrationReport>,
    pub warnings: Vec<Warning>,
    pub pooling: Option<PoolingSummary>,
    pub severity: SeverityPreset,
    pub overlap: bool,
    pub level: f64,
    pub prepared: Prepared,
}

impl FitResult {
    pub fn posterior_mean_beta(&self) -> Vec<f64> {
        self.beta.iter().map(|b| b.mean).collect()
    }

    /// Posterior-mean τ(xᵢ) for the fitted units.
    pub fn tau_hat(&self) -> Vec<f64> {
        self.prepared.phi.apply(&self.posterior_mean_beta())
    }

    pub fn summary_json(&self) -> Value {
        let beta: Vec<Value> = self
            .beta
            .iter()
            .zip(&self.basis.terms)
            .map(|(b, t)| json!({"term": t.to_string(), "mean": b.mean, "sd": b.sd, "ci": [b.lo, b.hi]}))
            .collect();
        let diagnostics = match &self.diagnostics {
            Some(d) => json!({
                "max_r_hat": finite_or_null(d.max_r_hat()),
                "min_ess": finite_or_null(d.min_ess()),
                "min_bfmi": finite_or_null(d.min_bfmi()),
                "divergences": d.divergences,
                "r_hat": d.r_hat.iter().map(|v| finite_or_null(*v)).collect::<Vec<_>>(),
                "ess": d.ess.iter().map(|v| finite_or_null(*v)).collect::<Vec<_>>(),
                "iac": d.iac.iter().map(|v| finite_or_null(*v)).collect::<Vec<_>>(),
                "bfmi": d.bfmi.iter().map(|v| finite_or_null(*v)).collect::<Vec<_>>(),
                "mean_step_size": self.draws.mean_step_size(),
            }),
            None => Value::Null,
        };
        let mut out = json!({
            "ate": {"mean": self.ate.mean, "sd": self.ate.sd, "ci": [self.ate.lo, self.ate.hi], "level": self.level},
            "beta": beta,
            "diagnostics": diagnostics,
            "eta": self.eta,
            "warnings": self.warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
            "severity": self.severity,
            "likelihood": self.likelihood,
            "overlap_weights": self.overlap,
            "basis": self.basis.to_string(),
            "nuisance": {
                "outcome_loss": self.prepared.nuisance.outcome_loss,
                "k_folds": self.prepared.nuisance.models.len(),
                "y_scale": self.prepared.nuisance.y_scale,
            },
            "n": self.prepared.pseudo.len(),
        });
        if let Some(c) = &self.calibration {
            out["calibration"] = serde_json::to_value(c).unwrap_or(Value::Null);
        }
        if let Some(p) = &self.pooling {
            out["pooling"] = serde_json::to_value(p).unwrap_or(Value::Null);
        }
        out
    }
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn fit(ds: &CausalDataset, cfg: &FitConfig) -> Result<FitResult> {
    let prep = prepare(ds, cfg, None)?;
    let (fixed_eta, selector_report) = selected_eta(ds, cfg, &prep)?;
    if let Some(mc) = &cfg.modular {
        let pooled = modular::modular_fit_with(ds, cfg, mc, fixed_eta).stage("modular pooling")?;
        let a = ate_contrast(&prep.phi);
        let ate = pooled.contrast_summary(&a, cfg.level)?;
        let beta = (0..prep.phi.ncols())
            .map(|j| {
                let mut e = vec![0.0; prep.phi.ncols()];
                e[j] = 1.0;
                pooled.contrast_summary(&e, cfg.level)
            })
            .collect::<Result<Vec<_>>>()?;
        let draws = pooled.concatenated()?;
        let diagnostics = ChainDiagnostics::worst(
            &pooled.per_m.iter().filter_map(|f| f.diagnostics.clone()).collect::<Vec<_>>(),
        );
        let eta = pooled.per_m.iter().map(|f| f.eta).sum::<f64>() / pooled.per_m.len() as f64;
        let likelihood = pooled.per_m[0].likelihood;
        let mut warnings = prep.warnings.clone();
        if pooled.per_m.iter().any(|f| f.diagnostics.as_ref().is_some_and(|d| d.divergences > 0)) {
            warnings.push(divergence_warning(diagnostics.as_ref()));
        }
        return Ok(FitResult {
            ate,
            beta,
            basis: cfg.basis.clone(),
            draws,
            diagnostics,
            eta,
            likelihood,
            calibration: selector_report.or_else(|| pooled.calibration.clone()),
            warnings,
            pooling: Some(pooled.summary(&a)),
            severity: cfg.severity,
            overlap: prep.overlap,
            level: cfg.level,
            prepared: prep,
        });
    }
    let (post, report) = phase3(&prep, cfg, fixed_eta, cfg.phase3_seed(0)).stage("posterior")?;
    let a = ate_contrast(&prep.phi);
    let ate = summarize_contrast(&post.draws, &a, cfg.level)?;
    let beta = summarize_beta(&post.draws, cfg.level)?;
    let mut warnings = prep.warnings.clone();
    if post.diagnostics.as_ref().is_some_and(|d| d.divergences > 0) {
        warnings.push(divergence_warning(post.diagnostics.as_ref()));
    }
    Ok(FitResult {
        ate,
        beta,
        basis: cfg.basis.clone(),
        eta: post.eta,
        likelihood: post.likelihood,
        diagnostics: post.diagnostics,
        draws: post.draws,
        calibration: selector_report.or(report),
        warnings,
        pooling: None,
        severity: cfg.severity,
        overlap: prep.overlap,
        level: cfg.level,
        prepared: prep,
    })
}

fn divergence_warning(d: Option<&ChainDiagnostics>) -> Warning {
    Warning::new(
        WarningCode::Extremes,
        format!(
            "{} divergent transition(s) after warmup; intervals may be unreliable",
            d.map_or(0, |d| d.divergences)
        ),
    )
}

/// Posterior τ(x) summaries for new covariate rows.
pub fn predict_cate(result: &FitResult, x: &Covariates) -> Result<CateSummary> {
    summarize_cate(&result.draws, &result.basis, x, result.level)
}
