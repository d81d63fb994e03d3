//! Generalised posterior log-density: η-tempered robust or parametric
//! likelihood on pseudo-outcomes plus a Student-t or Gaussian prior.

use serde::{Deserialize, Serialize};

use crate::basis::DesignMatrix;
use crate::error::{Error, Result};
use crate::losses::{mad, LossKind, MAD_CONSISTENCY, TUKEY_C, WELSCH_C};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodKind {
    Welsch { c: f64 },
    /// `sigma: None` infers σ under a half-Cauchy(1) prior.
    Gaussian { sigma: Option<f64> },
    StudentT { nu: f64, sigma: Option<f64> },
    Tukey { c: f64 },
}

impl Default for LikelihoodKind {
    fn default() -> Self {
        LikelihoodKind::Welsch { c: WELSCH_C }
    }
}

impl LikelihoodKind {
    pub fn tukey_default() -> Self {
        LikelihoodKind::Tukey { c: TUKEY_C }
    }

    pub fn infers_sigma(&self) -> bool {
        matches!(
            self,
            LikelihoodKind::Gaussian { sigma: None } | LikelihoodKind::StudentT { sigma: None, .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodKind::Welsch { .. } => "welsch",
            LikelihoodKind::Gaussian { .. } => "gaussian",
            LikelihoodKind::StudentT { .. } => "student_t",
            LikelihoodKind::Tukey { .. } => "tukey",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LikelihoodKind::Welsch { c } | LikelihoodKind::Tukey { c } => c.is_finite() && c > 0.0,
            LikelihoodKind::Gaussian { sigma } => sigma.is_none_or(|s| s.is_finite() && s > 0.0),
            LikelihoodKind::StudentT { nu, sigma } => {
                nu.is_finite() && nu > 0.0 && sigma.is_none_or(|s| s.is_finite() && s > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid likelihood parameters: {self:?}")))
        }
    }

    /// Per-unit negative log-likelihood contribution ρ(r; σ) and its
    /// residual derivatives ψ = ∂ρ/∂r, ψ′ = ∂²ρ/∂r², ignoring σ terms.
    pub fn rho_psi(&self, r: f64, sigma: f64) -> (f64, f64, f64) {
        match *self {
            LikelihoodKind::Welsch { c } => {
                let l = LossKind::Welsch { c };
                (l.rho(r), l.psi(r), l.psi_prime(r))
            }
            LikelihoodKind::Tukey { c } => {
                let l = LossKind::Tukey { c };
                (l.rho(r), l.psi(r), l.psi_prime(r))
            }
            LikelihoodKind::Gaussian { .. } => {
                let s2 = sigma * sigma;
                (0.5 * r * r / s2, r / s2, 1.0 / s2)
            }
            LikelihoodKind::StudentT { nu, .. } => {
                let s2 = nu * sigma * sigma;
                let q = s2 + r * r;
                (
                    0.5 * (nu + 1.0) * (1.0 + r * r / s2).ln(),
                    (nu + 1.0) * r / q,
                    (nu + 1.0) * (s2 - r * r) / (q * q),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LikelihoodSpec {
    pub kind: LikelihoodKind,
    pub eta: f64,
    /// Scale the Welsch/Tukey constant by MAD(D)/0.6745 at fit start.
    pub mad_rescale: bool,
}

impl Default for LikelihoodSpec {
    fn default() -> Self {
        Self {
            kind: LikelihoodKind::default(),
            eta: 1.0,
            mad_rescale: false,
        }
    }
}

impl LikelihoodSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        self.kind.validate()
    }

    /// Likelihood with any MAD rescaling applied to the tuning constant.
    pub fn resolve(&self, d: &[f64]) -> Result<LikelihoodKind> {
        self.validate()?;
        if !self.mad_rescale {
            return Ok(self.kind);
        }
        let s = mad(d, false)? / MAD_CONSISTENCY;
        Ok(match self.kind {
            LikelihoodKind::Welsch { c } => LikelihoodKind::Welsch { c: c * s },
            LikelihoodKind::Tukey { c } => LikelihoodKind::Tukey { c: c * s },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorFamily {
    StudentT { nu: f64 },
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(flatten)]
    pub family: PriorFamily,
    pub scale: f64,
}

impl PriorSpec {
    /// Student-t(3) with σ_β = 10, or 2 once p ≥ 10.
    pub fn default_for(p: usize) -> Self {
        Self {
            family: PriorFamily::StudentT { nu: 3.0 },
            scale: if p >= 10 { 2.0 } else { 10.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale.is_finite()
            && self.scale > 0.0
            && match self.family {
                PriorFamily::StudentT { nu } => nu.is_finite() && nu > 0.0,
                PriorFamily::Gaussian => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid prior: {self:?}")))
        }
    }

    /// log density (up to a constant) and derivative for one coordinate.
    #[inline]
    pub fn log_density_grad(&self, b: f64) -> (f64, f64) {
        let s2 = self.scale * self.scale;
        match self.family {
            PriorFamily::StudentT { nu } => (
                -0.5 * (nu + 1.0) * (1.0 + b * b / (nu * s2)).ln(),
                -(nu + 1.0) * b / (nu * s2 + b * b),
            ),
            PriorFamily::Gaussian => (-0.5 * b * b / s2, -b / s2),
        }
    }
}

/// A differentiable log-density over ℝ^dim. Returns NaN or −∞ outside the
/// support instead of failing, so samplers can treat it as divergence.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// p(β) · exp(−η Σ wᵢ ρ(Dᵢ − φᵢᵀβ)). When σ is inferred the final
/// coordinate is log σ.
#[derive(Debug, Clone)]
pub struct GeneralizedPosterior {
    phi: DesignMatrix,
    d: Vec<f64>,
    w: Vec<f64>,
    kind: LikelihoodKind,
    eta: f64,
    prior: PriorSpec,
}

impl GeneralizedPosterior {
    /// `kind` should already be resolved (see [`LikelihoodSpec::resolve`]).
    pub fn new(phi: DesignMatrix, d: Vec<f64>, w: Vec<f64>, kind: LikelihoodKind, eta: f64, prior: PriorSpec) -> Result<Self> {
        if phi.nrows() != d.len() || w.len() != d.len() {
            return Err(Error::DataShape(format!(
                "design has {} rows, pseudo-outcomes {}, weights {}",
                phi.nrows(),
                d.len(),
                w.len()
            )));
        }
        if d.iter().chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::invalid("pseudo-outcomes and weights must be finite"));
        }
        kind.validate()?;
        prior.validate()?;
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::invalid(format!("eta must be positive, got {eta}")));
        }
        Ok(Self { phi, d, w, kind, eta, prior })
    }

    pub fn p(&self) -> usize {
        self.phi.ncols()
    }

    pub fn kind(&self) -> LikelihoodKind {
        self.kind
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.phi
    }

    pub fn pseudo(&self) -> (&[f64], &[f64]) {
        (&self.d, &self.w)
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::new(self.phi.clone(), self.d.clone(), self.w.clone(), self.kind, eta, self.prior)
    }

    pub fn sigma_at(&self, theta: &[f64]) -> f64 {
        match self.kind {
            LikelihoodKind::Gaussian { sigma: Some(s) } | LikelihoodKind::StudentT { sigma: Some(s), .. } => s,
            LikelihoodKind::Gaussian { sigma: None } | LikelihoodKind::StudentT { sigma: None, .. } => {
                theta[self.p()].exp()
            }
            _ => 1.0,
        }
    }

    pub fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        self.phi.apply(beta).iter().zip(&self.d).map(|(f, d)| d - f).collect()
    }

    /// Checked evaluation returning (log p, ∇ log p).
    pub fn evaluate(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.dim() {
            return Err(Error::DataShape(format!("expected {} parameters, got {}", self.dim(), theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        let mut g = vec![0.0; self.dim()];
        let lp = self.log_density_grad(theta, &mut g);
        if !lp.is_finite() {
            return Err(Error::numeric("log density is not finite"));
        }
        Ok((lp, g))
    }
}

impl LogDensity for GeneralizedPosterior {
    fn dim(&self) -> usize {
        self.p() + usize::from(self.kind.infers_sigma())
    }

    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.p();
        let beta = &theta[..p];
        let sigma = self.sigma_at(theta);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loglik = 0.0;
        let mut wsum = 0.0;
        let mut ds = 0.0;
        for i in 0..self.d.len() {
            let row = self.phi.row(i);
            let fit: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            let r = self.d[i] - fit;
            let (rho, psi, _) = self.kind.rho_psi(r, sigma);
            let w = self.w[i];
            loglik -= w * rho;
            let s = w * psi;
            for (g, a) in grad[..p].iter_mut().zip(row) {
                *g += s * a;
            }
            if self.kind.infers_sigma() {
                wsum += w;
                // ∂ρ/∂log σ = −r ψ for both scale families.
                ds += w * r * psi;
            }
        }
        let mut lp = self.eta * loglik;
        for g in grad[..p].iter_mut() {
            *g *= self.eta;
        }
        if self.kind.infers_sigma() {
            let log_s = theta[p];
            // −η Σ w log σ from the normalising constant.
            lp -= self.eta * wsum * log_s;
            // Half-Cauchy(1) on σ plus the log-Jacobian of σ = exp(s).
            lp += -(1.0 + sigma * sigma).ln() + log_s;
            grad[p] = self.eta * (ds - wsum) - 2.0 * sigma * sigma / (1.0 + sigma * sigma) + 1.0;
        }
        for (j, &b) in beta.iter().enumerate() {
            let (l, g) = self.prior.log_density_grad(b);
            lp += l;
            grad[j] += g;
        }
        lp
    }
}
