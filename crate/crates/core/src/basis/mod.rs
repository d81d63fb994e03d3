//! CATE basis φ(x): term specs, evaluation, threshold search and
//! Bayesian model averaging over candidate thresholds.

mod bma;

pub use bma::{bma_over_thresholds, BmaResult};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::numeric::{mean, median};

/// One column of the design matrix. Text form: `1`, `x2`, `x0^3`,
/// `|x0|>1.96`, `x0>1.5`, `spline(x1,0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BasisTerm {
    Intercept,
    Linear(usize),
    Power(usize, u32),
    TailIndicator { feature: usize, threshold: f64, two_sided: bool },
    /// Truncated cubic (x − knot)₊³.
    SplineKnot { feature: usize, knot: f64 },
}

impl BasisTerm {
    pub fn feature(&self) -> Option<usize> {
        match *self {
            BasisTerm::Intercept => None,
            BasisTerm::Linear(f) | BasisTerm::Power(f, _) => Some(f),
            BasisTerm::TailIndicator { feature, .. } | BasisTerm::SplineKnot { feature, .. } => Some(feature),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            BasisTerm::Intercept => 1.0,
            BasisTerm::Linear(f) => x[f],
            BasisTerm::Power(f, k) => x[f].powi(k as i32),
            BasisTerm::TailIndicator { feature, threshold, two_sided } => {
                let v = if two_sided { x[feature].abs() } else { x[feature] };
                if v > threshold {
                    1.0
                } else {
                    0.0
                }
            }
            BasisTerm::SplineKnot { feature, knot } => (x[feature] - knot).max(0.0).powi(3),
        }
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BasisTerm::Intercept => write!(f, "1"),
            BasisTerm::Linear(j) => write!(f, "x{j}"),
            BasisTerm::Power(j, k) => write!(f, "x{j}^{k}"),
            BasisTerm::TailIndicator { feature, threshold, two_sided: true } => write!(f, "|x{feature}|>{threshold}"),
            BasisTerm::TailIndicator { feature, threshold, two_sided: false } => write!(f, "x{feature}>{threshold}"),
            BasisTerm::SplineKnot { feature, knot } => write!(f, "spline(x{feature},{knot})"),
        }
    }
}

fn parse_feature(s: &str) -> Option<usize> {
    s.trim().strip_prefix('x')?.parse().ok()
}

impl FromStr for BasisTerm {
    type Err = Error;

    fn from_str(raw: &str) -> Result<Self> {
        let s: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || Error::invalid(format!("cannot parse basis term '{raw}'"));
        if s == "1" || s.eq_ignore_ascii_case("intercept") {
            return Ok(BasisTerm::Intercept);
        }
        if let Some(inner) = s.strip_prefix("spline(").and_then(|r| r.strip_suffix(')')) {
            let (f, k) = inner.split_once(',').ok_or_else(bad)?;
            return Ok(BasisTerm::SplineKnot {
                feature: parse_feature(f).ok_or_else(bad)?,
                knot: k.parse().map_err(|_| bad())?,
            });
        }
        if let Some((lhs, t)) = s.split_once('>') {
            let threshold: f64 = t.parse().map_err(|_| bad())?;
            if let Some(inner) = lhs.strip_prefix('|').and_then(|r| r.strip_suffix('|')) {
                return Ok(BasisTerm::TailIndicator {
                    feature: parse_feature(inner).ok_or_else(bad)?,
                    threshold,
                    two_sided: true,
                });
            }
            return Ok(BasisTerm::TailIndicator {
                feature: parse_feature(lhs).ok_or_else(bad)?,
                threshold,
                two_sided: false,
            });
        }
        if let Some((f, k)) = s.split_once('^') {
            return Ok(BasisTerm::Power(
                parse_feature(f).ok_or_else(bad)?,
                k.parse().map_err(|_| bad())?,
            ));
        }
        parse_feature(&s).map(BasisTerm::Linear).ok_or_else(bad)
    }
}

impl TryFrom<String> for BasisTerm {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BasisTerm> for String {
    fn from(t: BasisTerm) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BasisSpec {
    pub terms: Vec<BasisTerm>,
}

impl TryFrom<String> for BasisSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<BasisSpec> for String {
    fn from(b: BasisSpec) -> String {
        b.to_string()
    }
}

impl BasisSpec {
    pub fn new(terms: Vec<BasisTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("basis needs at least one term"));
        }
        Ok(Self { terms })
    }

    pub fn intercept() -> Self {
        Self { terms: vec![BasisTerm::Intercept] }
    }

    /// [1, x0, …, x{d−1}]
    pub fn linear(d: usize) -> Self {
        let mut terms = vec![BasisTerm::Intercept];
        terms.extend((0..d).map(BasisTerm::Linear));
        Self { terms }
    }

    /// [1, 1{|x_f| > c}]
    pub fn tail(feature: usize, threshold: f64) -> Self {
        Self {
            terms: vec![
                BasisTerm::Intercept,
                BasisTerm::TailIndicator { feature, threshold, two_sided: true },
            ],
        }
    }

    /// Parse a comma-separated term list, e.g. `1, |x0|>1.96`. Commas inside
    /// `spline(...)` are respected.
    pub fn parse(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        let mut depth = 0;
        let mut cur = String::new();
        for ch in s.chars() {
            match ch {
                '(' => depth += 1,
                ')' => depth -= 1,
                _ => {}
            }
            if ch == ',' && depth == 0 {
                terms.push(cur.parse()?);
                cur.clear();
            } else {
                cur.push(ch);
            }
        }
        if !cur.trim().is_empty() {
            terms.push(cur.parse()?);
        }
        Self::new(terms)
    }

    pub fn p(&self) -> usize {
        self.terms.len()
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::invalid("basis needs at least one term"));
        }
        for t in &self.terms {
            if let Some(f) = t.feature() {
                if f >= d {
                    return Err(Error::invalid(format!("basis term {t} uses x{f} but data has {d} covariates")));
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, x: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x)).collect()
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join(", "))
    }
}

/// Evaluated n×p design matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    p: usize,
    values: Vec<f64>,
    pub spec: BasisSpec,
}

impl DesignMatrix {
    /// Raw constructor for callers that build Φ directly.
    pub fn from_row_major(n: usize, p: usize, values: Vec<f64>, spec: BasisSpec) -> Result<Self> {
        if values.len() != n * p || spec.p() != p {
            return Err(Error::DataShape("design matrix shape mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite design matrix entry"));
        }
        Ok(Self { n, p, values, spec })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.values[i * self.p + j]).collect()
    }

    /// Φβ
    pub fn apply(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn evaluate_basis(spec: &BasisSpec, x: &Covariates) -> Result<DesignMatrix> {
    spec.check_dim(x.ncols())?;
    let p = spec.p();
    let mut values = Vec::with_capacity(x.nrows() * p);
    for i in 0..x.nrows() {
        let row = x.row(i);
        values.extend(spec.terms.iter().map(|t| t.eval(row)));
    }
    DesignMatrix::from_row_major(x.nrows(), p, values, spec.clone())
}

/// Minimum units on either side of a candidate split.
pub const MIN_SIDE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub median_abs_residual: f64,
    pub mean_abs_residual: f64,
}

/// Score each candidate two-sided threshold by the median absolute residual of
/// a two-group (per-side median) fit to `d`. Degenerate candidates are skipped.
pub fn score_thresholds(d: &[f64], x: &Covariates, feature: usize, candidates: &[f64]) -> Result<Vec<ThresholdScore>> {
    if feature >= x.ncols() {
        return Err(Error::invalid(format!("feature x{feature} out of range")));
    }
    if d.len() != x.nrows() {
        return Err(Error::DataShape("pseudo-outcome length mismatch".into()));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate thresholds"));
    }
    let col = x.column(feature);
    let mut out = Vec::new();
    for &c in candidates {
        let (inside, outside): (Vec<usize>, Vec<usize>) = (0..d.len()).partition(|&i| col[i].abs() > c);
        if inside.len() < MIN_SIDE || outside.len() < MIN_SIDE {
            continue;
        }
        let m_in = median(&inside.iter().map(|&i| d[i]).collect::<Vec<_>>());
        let m_out = median(&outside.iter().map(|&i| d[i]).collect::<Vec<_>>());
        let res: Vec<f64> = (0..d.len())
            .map(|i| (d[i] - if col[i].abs() > c { m_in } else { m_out }).abs())
            .collect();
        out.push(ThresholdScore {
            threshold: c,
            median_abs_residual: median(&res),
            mean_abs_residual: mean(&res),
        });
    }
    if out.is_empty() {
        return Err(Error::degenerate(format!(
            "every candidate threshold leaves fewer than {MIN_SIDE} units on one side"
        )));
    }
    Ok(out)
}

/// Strict improvement, treating values within relative rounding noise as tied.
fn better(b: &ThresholdScore, a: &ThresholdScore) -> bool {
    let tied = |x: f64, y: f64| (x - y).abs() <= 1e-10 * x.abs().max(y.abs());
    if !tied(b.median_abs_residual, a.median_abs_residual) {
        return b.median_abs_residual < a.median_abs_residual;
    }
    !tied(b.mean_abs_residual, a.mean_abs_residual) && b.mean_abs_residual < a.mean_abs_residual
}

/// Candidate minimising the median absolute residual; ties go to the smaller
/// mean absolute residual, then to the earlier candidate.
pub fn grid_search_threshold(d: &[f64], x: &Covariates, feature: usize, candidates: &[f64]) -> Result<f64> {
    let scores = score_thresholds(d, x, feature, candidates)?;
    let best = scores
        .iter()
        .reduce(|a, b| if better(b, a) { b } else { a })
        .expect("non-empty");
    Ok(best.threshold)
}

pub const DEFAULT_THRESHOLD_GRID: [f64; 8] = [1.0, 1.25, 1.5, 1.75, 1.96, 2.25, 2.5, 3.0];
