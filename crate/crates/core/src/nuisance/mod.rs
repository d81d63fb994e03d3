//! Phase 1: cross-fitted outcome and propensity models.

mod gbt;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use gbt::{fit_gbt, fit_propensity, GbtModel, GbtParams, PropensityModel};

use crate::data::CausalDataset;
use crate::error::{Error, Result, StageExt};
use crate::losses::{mad, LossKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityPreset {
    #[default]
    None,
    Mild,
    Moderate,
    Severe,
}

impl SeverityPreset {
    pub const ALL: [SeverityPreset; 4] = [Self::None, Self::Mild, Self::Moderate, Self::Severe];

    pub fn loss(self) -> LossKind {
        match self {
            Self::None => LossKind::SquaredError,
            Self::Mild => LossKind::Huber { delta: 1.345 },
            Self::Moderate => LossKind::Huber { delta: 1.0 },
            Self::Severe => LossKind::Huber { delta: 0.5 },
        }
    }

    /// Welsch constant used when the caller ties Phase 3 to the preset.
    pub fn welsch_c(self) -> f64 {
        match self {
            Self::None | Self::Mild => 1.34,
            Self::Moderate => 1.0,
            Self::Severe => 0.5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Mild => "mild",
            Self::Moderate => "moderate",
            Self::Severe => "severe",
        }
    }
}

impl fmt::Display for SeverityPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeverityPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "mild" => Ok(Self::Mild),
            "moderate" => Ok(Self::Moderate),
            "severe" => Ok(Self::Severe),
            other => Err(Error::invalid(format!(
                "unknown severity '{other}' (expected none, mild, moderate or severe)"
            ))),
        }
    }
}

/// Outcome-model parameters for a preset.
/// Explicit outcome-booster settings; any field given replaces the preset's value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoosterOverrides {
    pub n_trees: Option<usize>,
    pub max_depth: Option<usize>,
    pub learning_rate: Option<f64>,
    pub min_samples_leaf: Option<usize>,
    pub l2: Option<f64>,
    pub subsample: Option<f64>,
    pub huber_delta: Option<f64>,
}

impl BoosterOverrides {
    pub fn apply(&self, mut p: GbtParams) -> GbtParams {
        if let Some(v) = self.n_trees {
            p.n_trees = v;
        }
        if let Some(v) = self.max_depth {
            p.max_depth = v;
        }
        if let Some(v) = self.learning_rate {
            p.learning_rate = v;
        }
        if let Some(v) = self.min_samples_leaf {
            p.min_samples_leaf = v;
        }
        if let Some(v) = self.l2 {
            p.l2 = v;
        }
        if let Some(v) = self.subsample {
            p.subsample = v;
        }
        if let Some(d) = self.huber_delta {
            p.loss = LossKind::Huber { delta: d };
        }
        p
    }
}

pub fn severity_to_config(preset: SeverityPreset) -> GbtParams {
    GbtParams {
        loss: preset.loss(),
        ..GbtParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub outcome: GbtParams,
    pub propensity: GbtParams,
    pub k_folds: usize,
    pub standardize_y: bool,
    pub clip: (f64, f64),
}

impl NuisanceConfig {
    pub fn from_severity(preset: SeverityPreset) -> Self {
        Self {
            outcome: severity_to_config(preset),
            ..Self::default()
        }
    }
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            outcome: severity_to_config(SeverityPreset::None),
            propensity: GbtParams::propensity_default(),
            k_folds: 2,
            standardize_y: false,
            clip: (0.01, 0.99),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldModels {
    pub mu0: GbtModel,
    pub mu1: GbtModel,
    pub propensity: PropensityModel,
}

/// Out-of-fold nuisance predictions, on the original outcome scale.
#[derive(Debug, Clone)]
pub struct NuisanceFits {
    pub mu0_hat: Vec<f64>,
    pub mu1_hat: Vec<f64>,
    pub pi_hat: Vec<f64>,
    pub fold_assignment: Vec<usize>,
    pub y_scale: f64,
    pub outcome_loss: LossKind,
    pub models: Vec<FoldModels>,
}

/// Stratified fold labels: each arm is shuffled and dealt round-robin.
pub fn assign_folds(w: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, &[rng::tag("folds")]);
    let mut folds = vec![0; w.len()];
    for arm in [false, true] {
        let mut idx: Vec<usize> = (0..w.len()).filter(|&i| w[i] == arm).collect();
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            folds[i] = j % k;
        }
    }
    folds
}

/// K-fold cross-fitting of μ₀, μ₁ and π. `sample_weights` (e.g. Bayesian
/// bootstrap weights) enter every model fit; folds depend only on `seed`.
pub fn cross_fit(
    ds: &CausalDataset,
    cfg: &NuisanceConfig,
    seed: u64,
    sample_weights: Option<&[f64]>,
) -> Result<NuisanceFits> {
    ds.validate()?;
    let k = cfg.k_folds;
    if k < 2 {
        return Err(Error::invalid(format!("k_folds must be at least 2, got {k}")));
    }
    if let Some(sw) = sample_weights {
        if sw.len() != ds.len() {
            return Err(Error::DataShape("sample weight length mismatch".into()));
        }
    }
    let folds = assign_folds(&ds.w, k, seed);
    for f in 0..k {
        let treated = (0..ds.len()).filter(|&i| folds[i] == f && ds.w[i]).count();
        let members = folds.iter().filter(|&&g| g == f).count();
        if treated == 0 || treated == members {
            return Err(Error::DataShape(format!(
                "fold {f} lacks {} units",
                if treated == 0 { "treated" } else { "control" }
            )));
        }
    }

    let y_scale = if cfg.standardize_y { mad(&ds.y, true)? } else { 1.0 };
    let y_std: Vec<f64> = ds.y.iter().map(|v| v / y_scale).collect();

    use rayon::prelude::*;
    let per_fold: Vec<Result<FoldModels>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let fold_seed = rng::derive_seed(seed, &[rng::tag("fold-model"), f as u64]);
            let train: Vec<usize> = (0..ds.len()).filter(|&i| folds[i] != f).collect();
            let fit_arm = |arm: bool, tag: &str| -> Result<GbtModel> {
                let rows: Vec<usize> = train.iter().copied().filter(|&i| ds.w[i] == arm).collect();
                let x = ds.x.select_rows(&rows);
                let y: Vec<f64> = rows.iter().map(|&i| y_std[i]).collect();
                let sw: Option<Vec<f64>> = sample_weights.map(|s| rows.iter().map(|&i| s[i]).collect());
                let params = GbtParams {
                    seed: rng::derive_seed(fold_seed, &[rng::tag(tag)]),
                    ..cfg.outcome
                };
                fit_gbt(&x, &y, &params, sw.as_deref())
            };
            let ((mu0, mu1), propensity) = rayon::join(
                || rayon::join(|| fit_arm(false, "mu0"), || fit_arm(true, "mu1")),
                || {
                    let x = ds.x.select_rows(&train);
                    let w: Vec<bool> = train.iter().map(|&i| ds.w[i]).collect();
                    let sw: Option<Vec<f64>> = sample_weights.map(|s| train.iter().map(|&i| s[i]).collect());
                    let params = GbtParams {
                        seed: rng::derive_seed(fold_seed, &[rng::tag("pi")]),
                        ..cfg.propensity
                    };
                    fit_propensity(&x, &w, &params, cfg.clip, sw.as_deref())
                },
            );
            Ok(FoldModels {
                mu0: mu0?,
                mu1: mu1?,
                propensity: propensity?,
            })
        })
        .collect();
    let models = per_fold
        .into_iter()
        .enumerate()
        .map(|(f, m)| m.stage(format!("fold {f}")))
        .collect::<Result<Vec<_>>>()?;

    let n = ds.len();
    let mut mu0_hat = vec![0.0; n];
    let mut mu1_hat = vec![0.0; n];
    let mut pi_hat = vec![0.0; n];
    for (f, m) in models.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
        let x = ds.x.select_rows(&rows);
        let p0 = m.mu0.predict(&x)?;
        let p1 = m.mu1.predict(&x)?;
        let pp = m.propensity.predict(&x)?;
        for (j, &i) in rows.iter().enumerate() {
            mu0_hat[i] = p0[j] * y_scale;
            mu1_hat[i] = p1[j] * y_scale;
            pi_hat[i] = pp[j];
        }
    }
    Ok(NuisanceFits {
        mu0_hat,
        mu1_hat,
        pi_hat,
        fold_assignment: folds,
        y_scale,
        outcome_loss: cfg.outcome.loss,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Covariates;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn linear_ds(n: usize, seed: u64) -> (CausalDataset, Vec<f64>, Vec<f64>) {
        let mut r = rng::stream(seed, &[]);
        let xs: Vec<f64> = (0..n * 3).map(|_| r.sample(StandardNormal)).collect();
        let x = Covariates::from_row_major(n, 3, xs).unwrap();
        let mut w = Vec::new();
        let mut y = Vec::new();
        let mut m0 = Vec::new();
        let mut m1 = Vec::new();
        for i in 0..n {
            let a = 1.0 + 2.0 * x.get(i, 0) - x.get(i, 1);
            let b = a + 2.0 + x.get(i, 2);
            let t = r.random::<bool>();
            let e: f64 = r.sample(StandardNormal);
            y.push(if t { b } else { a } + 0.3 * e);
            w.push(t);
            m0.push(a);
            m1.push(b);
        }
        (CausalDataset::new(x, w, y).unwrap(), m0, m1)
    }

    fn r2(pred: &[f64], truth: &[f64]) -> f64 {
        let m = truth.iter().sum::<f64>() / truth.len() as f64;
        let ss: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
        let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
        1.0 - se / ss
    }

    #[test]
    fn severity_map_is_pinned() {
        assert_eq!(SeverityPreset::None.loss(), LossKind::SquaredError);
        assert_eq!(SeverityPreset::Mild.loss(), LossKind::Huber { delta: 1.345 });
        assert_eq!(SeverityPreset::Moderate.loss(), LossKind::Huber { delta: 1.0 });
        assert_eq!(SeverityPreset::Severe.loss(), LossKind::Huber { delta: 0.5 });
        assert_eq!(severity_to_config(SeverityPreset::Severe).loss, LossKind::Huber { delta: 0.5 });
        assert_eq!("Severe".parse::<SeverityPreset>().unwrap(), SeverityPreset::Severe);
        assert!("extreme".parse::<SeverityPreset>().is_err());
    }

    #[test]
    fn default_uses_two_folds() {
        assert_eq!(NuisanceConfig::default().k_folds, 2);
    }

    #[test]
    fn folds_are_stratified() {
        let w: Vec<bool> = (0..101).map(|i| i % 3 == 0).collect();
        let f = assign_folds(&w, 2, 1);
        for k in 0..2 {
            let t = (0..101).filter(|&i| f[i] == k && w[i]).count();
            let c = (0..101).filter(|&i| f[i] == k && !w[i]).count();
            assert_eq!(t, 17);
            assert!((33..=34).contains(&c), "c {c}");
        }
    }

    #[test]
    fn out_of_fold_fit_quality() {
        let (ds, m0, m1) = linear_ds(2000, 3);
        let fits = cross_fit(&ds, &NuisanceConfig::default(), 11, None).unwrap();
        assert!(r2(&fits.mu0_hat, &m0) > 0.9);
        assert!(r2(&fits.mu1_hat, &m1) > 0.9);
        assert!(fits.pi_hat.iter().all(|p| (0.01..=0.99).contains(p)));
        assert_eq!(fits.y_scale, 1.0);
    }

    #[test]
    fn identical_seeds_give_identical_fits() {
        let (ds, _, _) = linear_ds(300, 4);
        let a = cross_fit(&ds, &NuisanceConfig::default(), 5, None).unwrap();
        let b = cross_fit(&ds, &NuisanceConfig::default(), 5, None).unwrap();
        assert_eq!(a.mu0_hat, b.mu0_hat);
        assert_eq!(a.mu1_hat, b.mu1_hat);
        assert_eq!(a.pi_hat, b.pi_hat);
    }

    #[test]
    fn predictions_exclude_own_fold() {
        // Each unit's prediction must equal that of its fold's model, which is
        // trained only on rows with a different fold label.
        let (ds, _, _) = linear_ds(300, 6);
        let fits = cross_fit(&ds, &NuisanceConfig::default(), 8, None).unwrap();
        for i in 0..ds.len() {
            let f = fits.fold_assignment[i];
            let m = &fits.models[f];
            assert_eq!(m.mu0.predict_row(ds.x.row(i)), fits.mu0_hat[i]);
        }
        // Perturbing every target in fold 0 leaves fold 0's predictions unchanged.
        let mut y = ds.y.clone();
        for i in 0..ds.len() {
            if fits.fold_assignment[i] == 0 {
                y[i] += 100.0;
            }
        }
        let ds2 = CausalDataset::new(ds.x.clone(), ds.w.clone(), y).unwrap();
        let fits2 = cross_fit(&ds2, &NuisanceConfig::default(), 8, None).unwrap();
        for i in 0..ds.len() {
            if fits.fold_assignment[i] == 0 {
                assert_eq!(fits.mu0_hat[i], fits2.mu0_hat[i]);
                assert_eq!(fits.mu1_hat[i], fits2.mu1_hat[i]);
            } else {
                assert_ne!(fits.mu0_hat[i], fits2.mu0_hat[i]);
            }
        }
    }

    #[test]
    fn fold_missing_an_arm_is_named() {
        let x = Covariates::from_row_major(10, 1, (0..10).map(f64::from).collect()).unwrap();
        let mut w = vec![false; 10];
        w[0] = true;
        let ds = CausalDataset::new(x, w, vec![0.0; 10]).unwrap();
        let err = cross_fit(&ds, &NuisanceConfig::default(), 1, None).unwrap_err();
        assert!(matches!(err, Error::DataShape(ref m) if m.contains("fold 1")), "{err}");
    }

    #[test]
    fn standardised_targets_record_scale() {
        let (mut ds, _, _) = linear_ds(400, 9);
        for v in ds.y.iter_mut() {
            *v *= 1000.0;
        }
        let cfg = NuisanceConfig { standardize_y: true, ..NuisanceConfig::default() };
        let fits = cross_fit(&ds, &cfg, 2, None).unwrap();
        let expect = mad(&ds.y, true).unwrap();
        assert_eq!(fits.y_scale, expect);
        let plain = cross_fit(&ds, &NuisanceConfig::default(), 2, None).unwrap();
        let rel = crate::numeric::mean(
            &fits.mu0_hat.iter().zip(&plain.mu0_hat).map(|(a, b)| (a - b).abs() / expect).collect::<Vec<_>>(),
        );
        assert!(rel < 0.05, "{rel}");
    }
}
