//! Tail-index diagnostics, severity recommendation and propensity warnings.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::CausalDataset;
use crate::error::{Error, Result};
use crate::nuisance::{fit_gbt, GbtParams, SeverityPreset};
use crate::numeric::{quantile_sorted, sorted};
use crate::pseudo::PseudoOutcomes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningCode {
    Overlap,
    Extremes,
    AutoSev,
}

impl WarningCode {
    pub fn prefix(self) -> &'static str {
        match self {
            WarningCode::Overlap => "WARN.OVERLAP",
            WarningCode::Extremes => "WARN.EXTREMES",
            WarningCode::AutoSev => "WARN.AUTOSEV",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub code: WarningCode,
    pub message: String,
}

impl Warning {
    pub fn new(code: WarningCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.code.prefix(), self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub alpha_hat: f64,
    pub threshold: f64,
    pub n_exceedances: usize,
}

/// Hill estimator on |values| above their (1 − top_fraction) quantile.
pub fn hill_estimator(values: &[f64], top_fraction: f64) -> Result<TailEstimate> {
    if values.len() < 20 {
        return Err(Error::invalid(format!("Hill estimator needs at least 20 values, got {}", values.len())));
    }
    if !(top_fraction > 0.0 && top_fraction <= 0.5) {
        return Err(Error::invalid(format!("top_fraction must lie in (0, 0.5], got {top_fraction}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("Hill estimator input contains non-finite values"));
    }
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let s = sorted(&abs);
    let t = quantile_sorted(&s, 1.0 - top_fraction);
    hill_above(&abs, t)
}

/// Hill estimator with an explicit threshold.
pub fn hill_above(abs_values: &[f64], threshold: f64) -> Result<TailEstimate> {
    if !(threshold > 0.0) {
        return Err(Error::degenerate("degenerate tail: threshold is not positive"));
    }
    let logs: Vec<f64> = abs_values
        .iter()
        .filter(|&&v| v > threshold)
        .map(|&v| (v / threshold).ln())
        .collect();
    if logs.len() < 2 {
        return Err(Error::degenerate(format!(
            "degenerate tail: {} exceedance(s) above {threshold}",
            logs.len()
        )));
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::degenerate("degenerate tail: exceedances all equal the threshold"));
    }
    Ok(TailEstimate {
        alpha_hat: 1.0 / mean,
        threshold,
        n_exceedances: logs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillPoint {
    pub k: usize,
    pub alpha_hat: f64,
}

/// α̂(k) from the k largest |values| relative to the (k+1)-th, for k in 2..=k_max.
pub fn hill_plot(values: &[f64], k_max: usize) -> Result<Vec<HillPoint>> {
    if values.len() < 3 {
        return Err(Error::invalid("Hill plot needs at least 3 values"));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| b.total_cmp(a));
    let k_max = k_max.min(abs.len() - 1);
    let mut out = Vec::new();
    let mut log_sum = 0.0;
    for k in 1..=k_max {
        log_sum += abs[k - 1].ln();
        let base = abs[k];
        if k < 2 || base <= 0.0 {
            continue;
        }
        let mean = log_sum / k as f64 - base.ln();
        if mean > 0.0 {
            out.push(HillPoint { k, alpha_hat: 1.0 / mean });
        }
    }
    Ok(out)
}

/// Pinned α̂ → preset mapping.
pub fn severity_from_alpha(alpha_hat: f64) -> SeverityPreset {
    if alpha_hat > 5.0 {
        SeverityPreset::None
    } else if alpha_hat > 3.0 {
        SeverityPreset::Mild
    } else if alpha_hat > 2.0 {
        SeverityPreset::Moderate
    } else {
        SeverityPreset::Severe
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoSeverityConfig {
    pub top_fraction: f64,
    pub model: GbtParams,
    /// Outcomes beyond this many robust SDs count as gross outliers.
    pub outlier_cutoff: f64,
}

impl Default for AutoSeverityConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.10,
            // Coarse leaves keep the fit from isolating individual extremes,
            // which would hide them from the residual tail.
            model: GbtParams {
                n_trees: 200,
                max_depth: 4,
                learning_rate: 0.1,
                min_samples_leaf: 20,
                l2: 0.0,
                ..GbtParams::default()
            },
            outlier_cutoff: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoSeverity {
    pub severity: SeverityPreset,
    pub alpha_hat: Option<f64>,
    pub tail: Option<TailEstimate>,
    /// Share of outcomes beyond `outlier_cutoff` robust SDs of Y.
    pub gross_outlier_share: f64,
    pub warnings: Vec<Warning>,
}

/// Squared-loss fit of Y on (X, W), then Hill on the absolute residuals.
pub fn residuals_for_severity(ds: &CausalDataset, model: &GbtParams) -> Result<Vec<f64>> {
    ds.validate()?;
    let xw = ds.x.with_column(&ds.treatment_as_f64())?;
    let params = GbtParams {
        loss: crate::losses::LossKind::SquaredError,
        ..model.clone()
    };
    let fit = fit_gbt(&xw, &ds.y, &params, None)?;
    let pred = fit.predict(&xw)?;
    Ok(ds.y.iter().zip(&pred).map(|(y, p)| y - p).collect())
}

pub fn auto_severity(ds: &CausalDataset, cfg: &AutoSeverityConfig) -> Result<AutoSeverity> {
    let resid = residuals_for_severity(ds, &cfg.model)?;
    Ok(severity_from_residuals(&resid, &ds.y, cfg))
}

/// The residual fit absorbs dense contamination, so the gross-outlier share is
/// measured on the raw outcomes instead.
pub fn severity_from_residuals(resid: &[f64], outcomes: &[f64], cfg: &AutoSeverityConfig) -> AutoSeverity {
    let mut warnings = Vec::new();
    let share = gross_outlier_share(outcomes, cfg.outlier_cutoff);
    let (severity, tail) = match hill_estimator(resid, cfg.top_fraction) {
        Ok(t) => (severity_from_alpha(t.alpha_hat), Some(t)),
        Err(e) => {
            warnings.push(Warning::new(
                WarningCode::AutoSev,
                format!("Hill estimate unavailable ({e}); defaulting to severity none"),
            ));
            (SeverityPreset::None, None)
        }
    };
    if severity == SeverityPreset::None && share >= cfg.top_fraction {
        warnings.push(Warning::new(
            WarningCode::AutoSev,
            format!(
                "{:.1}% of outcomes lie beyond {} robust SDs; dense contamination fills the Hill window \
                 and hides the tail, so severity none is likely wrong here. Consider severity severe.",
                100.0 * share,
                cfg.outlier_cutoff
            ),
        ));
    }
    AutoSeverity {
        severity,
        alpha_hat: tail.map(|t| t.alpha_hat),
        tail,
        gross_outlier_share: share,
        warnings,
    }
}

pub fn gross_outlier_share(values: &[f64], cutoff: f64) -> f64 {
    let Ok(sd) = crate::losses::mad(values, true) else {
        return 0.0;
    };
    if !(sd > 0.0) {
        return 0.0;
    }
    let center = crate::numeric::median(values);
    values.iter().filter(|&&r| (r - center).abs() > cutoff * sd).count() as f64 / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityCheck {
    pub warnings: Vec<Warning>,
    pub auto_overlap: bool,
    pub min: f64,
    pub max: f64,
}

pub const WARN_BOUNDS: (f64, f64) = (0.05, 0.95);
pub const AUTO_OVERLAP_BOUNDS: (f64, f64) = (0.02, 0.98);

pub fn propensity_warnings(pi_hat: &[f64]) -> PropensityCheck {
    let min = pi_hat.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pi_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut warnings = Vec::new();
    if min < WARN_BOUNDS.0 || max > WARN_BOUNDS.1 {
        warnings.push(Warning::new(
            WarningCode::Overlap,
            format!(
                "estimated propensities span [{min:.4}, {max:.4}], outside [{}, {}]",
                WARN_BOUNDS.0, WARN_BOUNDS.1
            ),
        ));
    }
    let auto_overlap = min < AUTO_OVERLAP_BOUNDS.0 || max > AUTO_OVERLAP_BOUNDS.1;
    PropensityCheck {
        warnings,
        auto_overlap,
        min,
        max,
    }
}

/// Legacy rescaling D ↦ D / t^α for |D| > t. Off by default; it destroys tail signal.
pub fn normalize_extremes(d: &PseudoOutcomes, tail_threshold: f64, tail_alpha: f64) -> Result<(PseudoOutcomes, Warning)> {
    if !(tail_threshold > 0.0) || !tail_threshold.is_finite() {
        return Err(Error::invalid(format!("tail threshold must be positive, got {tail_threshold}")));
    }
    if !tail_alpha.is_finite() || tail_alpha <= 0.0 {
        return Err(Error::invalid(format!("tail alpha must be positive, got {tail_alpha}")));
    }
    let div = tail_threshold.powf(tail_alpha);
    let mut out = d.clone();
    let mut touched = 0;
    for v in out.d.iter_mut() {
        if v.abs() > tail_threshold {
            *v /= div;
            touched += 1;
        }
    }
    let warning = Warning::new(
        WarningCode::Extremes,
        format!(
            "normalize_extremes rescaled {touched} pseudo-outcome(s) by 1/{div:.4}; \
             this shrinks genuine tail effects and is known to erase subgroup signal"
        ),
    );
    Ok((out, warning))
}
