//! Synthetic data-generating processes with known treatment effects.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::data::{CausalDataset, Covariates};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    /// τ ≡ 2; a `density` share of outcomes shifted by `whale_shift`.
    Whale,
    /// τ = 2 + 8·1{|x0| > 1.96}; contamination only if `density` > 0.
    TailHetero,
    /// Additive Pareto(`pareto_alpha`) draws on contaminated outcomes.
    Pareto,
    /// Student-t(`t_nu`) outcome noise.
    TNoise,
    /// Contaminated outcomes shifted by ±`whale_shift` with equal odds.
    Bimodal,
    /// Whale DGP with propensity logit coefficient 3.
    LowOverlap,
    /// Dollar scale: baseline ×`scale`, τ = `scale`, whales add 25·scale.
    DollarScale,
    /// τ(x) = 2 + x0, Gaussian noise.
    CleanLinear,
    /// Symmetric α-stable outcome noise (Chambers–Mallows–Stuck).
    AlphaStable,
}

impl DgpKind {
    pub const ALL: [DgpKind; 9] = [
        DgpKind::Whale,
        DgpKind::TailHetero,
        DgpKind::Pareto,
        DgpKind::TNoise,
        DgpKind::Bimodal,
        DgpKind::LowOverlap,
        DgpKind::DollarScale,
        DgpKind::CleanLinear,
        DgpKind::AlphaStable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DgpKind::Whale => "whale",
            DgpKind::TailHetero => "tail_hetero",
            DgpKind::Pareto => "pareto",
            DgpKind::TNoise => "t_noise",
            DgpKind::Bimodal => "bimodal",
            DgpKind::LowOverlap => "low_overlap",
            DgpKind::DollarScale => "dollar_scale",
            DgpKind::CleanLinear => "clean_linear",
            DgpKind::AlphaStable => "alpha_stable",
        }
    }
}

impl fmt::Display for DgpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DgpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        DgpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == key)
            .ok_or_else(|| Error::invalid(format!("unknown DGP kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpParams {
    pub whale_shift: f64,
    pub pareto_alpha: f64,
    pub t_nu: f64,
    pub stable_alpha: f64,
    /// Propensity logit coefficient on x0; `None` uses the kind's default.
    pub propensity_coef: Option<f64>,
    /// Outcome scale for `DollarScale`.
    pub scale: f64,
    /// Contaminate treated units only.
    pub treated_only: bool,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            whale_shift: 5000.0,
            pareto_alpha: 1.5,
            t_nu: 3.0,
            stable_alpha: 1.9,
            propensity_coef: None,
            scale: 1000.0,
            treated_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub dim: usize,
    pub density: f64,
    #[serde(default)]
    pub params: DgpParams,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, density: f64, seed: u64) -> Self {
        Self {
            kind,
            n,
            dim: 5,
            density,
            params: DgpParams::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::invalid(format!("n must be at least 50, got {}", self.n)));
        }
        if self.dim < 2 {
            return Err(Error::invalid("dim must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::invalid(format!("density must lie in [0, 1], got {}", self.density)));
        }
        let p = &self.params;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if !p.whale_shift.is_finite() {
            return Err(Error::invalid("whale_shift must be finite"));
        }
        positive("pareto_alpha", p.pareto_alpha)?;
        positive("t_nu", p.t_nu)?;
        positive("scale", p.scale)?;
        if !(p.stable_alpha > 0.0 && p.stable_alpha <= 2.0) {
            return Err(Error::invalid("stable_alpha must lie in (0, 2]"));
        }
        if p.propensity_coef.is_some_and(|c| !c.is_finite()) {
            return Err(Error::invalid("propensity_coef must be finite"));
        }
        Ok(())
    }

    fn propensity_coef(&self) -> f64 {
        self.params.propensity_coef.unwrap_or(match self.kind {
            DgpKind::LowOverlap => 3.0,
            _ => 0.3,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: CausalDataset,
    pub tau_true: Vec<f64>,
    pub contaminated: Vec<bool>,
    /// Tail units (|x0| > 1.96) for `TailHetero`; all false otherwise.
    pub subgroup: Vec<bool>,
    pub propensity: Vec<f64>,
    /// Uncontaminated potential outcomes.
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

impl GeneratedData {
    pub fn ate(&self) -> f64 {
        self.tau_true.iter().sum::<f64>() / self.tau_true.len() as f64
    }
}

/// Symmetric α-stable draw, S(α, 0, 1, 0).
pub fn stable_symmetric<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    let w: f64 = Exp1.sample(rng);
    if (alpha - 1.0).abs() < 1e-12 {
        return v.tan();
    }
    (alpha * v).sin() / v.cos().powf(1.0 / alpha) * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha)
}

pub fn generate(spec: &DgpSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let (n, dim) = (spec.n, spec.dim);
    let p = &spec.params;
    let mut r = rng::stream(spec.seed, &[rng::tag("dgp"), rng::tag(spec.kind.as_str())]);
    let xs: Vec<f64> = (0..n * dim).map(|_| r.sample(StandardNormal)).collect();
    let x = Covariates::from_row_major(n, dim, xs)?;
    let coef = spec.propensity_coef();
    let t_noise = StudentT::new(p.t_nu).map_err(|e| Error::invalid(e.to_string()))?;
    let scale = if spec.kind == DgpKind::DollarScale { p.scale } else { 1.0 };

    let mut tau_true = Vec::with_capacity(n);
    let mut contaminated = Vec::with_capacity(n);
    let mut subgroup = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    let mut y0s = Vec::with_capacity(n);
    let mut y1s = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = x.get(i, 0);
        let x1 = x.get(i, 1);
        let pi = 1.0 / (1.0 + (-coef * x0).exp());
        let treated = r.random::<f64>() < pi;
        let noise: f64 = match spec.kind {
            DgpKind::TNoise => t_noise.sample(&mut r),
            DgpKind::AlphaStable => stable_symmetric(p.stable_alpha, &mut r) / std::f64::consts::SQRT_2,
            _ => r.sample(StandardNormal),
        };
        let tail = x0.abs() > 1.96;
        let tau = match spec.kind {
            DgpKind::TailHetero => 2.0 + if tail { 8.0 } else { 0.0 },
            DgpKind::CleanLinear => 2.0 + x0,
            DgpKind::DollarScale => 1.0,
            _ => 2.0,
        } * scale;
        let y0 = scale * (1.0 + 0.5 * x0 + 0.5 * x1 + noise);
        let y1 = y0 + tau;
        let hit = r.random::<f64>() < spec.density && (!p.treated_only || treated);
        let shift = if hit {
            match spec.kind {
                DgpKind::Pareto => {
                    let u: f64 = r.random();
                    (1.0 - u).powf(-1.0 / p.pareto_alpha)
                }
                DgpKind::Bimodal => {
                    if r.random::<bool>() {
                        p.whale_shift
                    } else {
                        -p.whale_shift
                    }
                }
                DgpKind::DollarScale => 25.0 * scale,
                _ => p.whale_shift,
            }
        } else {
            0.0
        };
        w.push(treated);
        y.push(if treated { y1 } else { y0 } + shift);
        tau_true.push(tau);
        contaminated.push(hit);
        subgroup.push(spec.kind == DgpKind::TailHetero && tail);
        propensity.push(pi);
        y0s.push(y0);
        y1s.push(y1);
    }
    let n_treated = w.iter().filter(|&&b| b).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::DataShape(format!(
            "generated data has a single arm ({n_treated} treated of {n}); try another seed"
        )));
    }
    Ok(GeneratedData {
        dataset: CausalDataset::new(x, w, y)?.with_truth(tau_true.clone())?,
        tau_true,
        contaminated,
        subgroup,
        propensity,
        y0: y0s,
        y1: y1s,
    })
}
