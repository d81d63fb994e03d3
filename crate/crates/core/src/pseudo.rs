//! Phase 2: doubly robust pseudo-outcomes and overlap weights.

use crate::data::CausalDataset;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFits;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomes {
    pub d: Vec<f64>,
    pub weights: Vec<f64>,
    /// Arm that produced each pseudo-outcome (true = treated).
    pub source_arm: Vec<bool>,
}

impl PseudoOutcomes {
    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.iter().any(|&w| w != 1.0)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.d.len() {
            return Err(Error::DataShape("weight vector length mismatch".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        self.weights = weights;
        Ok(self)
    }
}

/// Single-unit DR pseudo-outcome.
#[inline]
pub fn dr_value(treated: bool, y: f64, mu0: f64, mu1: f64, pi: f64) -> f64 {
    if treated {
        mu1 - mu0 + (y - mu1) / pi
    } else {
        mu1 - mu0 - (y - mu0) / (1.0 - pi)
    }
}

/// Uses the observed arm for each unit; `nuisance` predictions are on the
/// original outcome scale already.
pub fn dr_pseudo_outcomes(ds: &CausalDataset, nuisance: &NuisanceFits) -> Result<PseudoOutcomes> {
    let n = ds.len();
    if nuisance.mu0_hat.len() != n || nuisance.mu1_hat.len() != n || nuisance.pi_hat.len() != n {
        return Err(Error::DataShape(format!(
            "nuisance predictions cover {} units, dataset has {n}",
            nuisance.pi_hat.len()
        )));
    }
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let pi = nuisance.pi_hat[i];
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::numeric(format!("propensity {pi} at unit {i} is outside (0, 1)")));
        }
        let v = dr_value(ds.w[i], ds.y[i], nuisance.mu0_hat[i], nuisance.mu1_hat[i], pi);
        if !v.is_finite() {
            return Err(Error::numeric(format!("non-finite pseudo-outcome at unit {i}")));
        }
        d.push(v);
    }
    Ok(PseudoOutcomes {
        d,
        weights: vec![1.0; n],
        source_arm: ds.w.clone(),
    })
}

/// π(1 − π), normalised to mean one.
pub fn overlap_weights(pi_hat: &[f64]) -> Result<Vec<f64>> {
    if pi_hat.is_empty() {
        return Err(Error::invalid("no propensities"));
    }
    if let Some(p) = pi_hat.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::invalid(format!("propensity {p} outside (0, 1)")));
    }
    let raw: Vec<f64> = pi_hat.iter().map(|p| p * (1.0 - p)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}
