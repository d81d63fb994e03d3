//! Robust ρ/ψ/ψ′ functions, Huber's minimax tuning constant, asymptotic
//! relative efficiency and the MAD scale estimate.
//!
//! Welsch uses the `exp(−r²/c²)` convention throughout, which keeps
//! ψ = dρ/dr exact for ρ = (c²/2)(1 − exp(−r²/c²)).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{brent, integrate, median, normal_pdf, normal_sf};

/// Default Welsch tuning constant.
pub const WELSCH_C: f64 = 1.34;
/// Conventional Tukey biweight tuning constant.
pub const TUKEY_C: f64 = 4.685;
/// MAD consistency constant for the normal distribution.
pub const MAD_CONSISTENCY: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    Huber { delta: f64 },
    Welsch { c: f64 },
    Tukey { c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub rho: f64,
    pub psi: f64,
    pub psi_prime: f64,
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        let (name, t) = match *self {
            LossKind::SquaredError => return Ok(()),
            LossKind::Huber { delta } => ("huber delta", delta),
            LossKind::Welsch { c } => ("welsch c", c),
            LossKind::Tukey { c } => ("tukey c", c),
        };
        if t.is_finite() && t > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("{name} must be positive and finite, got {t}")))
        }
    }

    pub fn evaluate(&self, r: f64) -> Result<LossEval> {
        self.validate()?;
        if !r.is_finite() {
            return Err(Error::invalid(format!("residual must be finite, got {r}")));
        }
        Ok(LossEval {
            rho: self.rho(r),
            psi: self.psi(r),
            psi_prime: self.psi_prime(r),
        })
    }

    #[inline]
    pub fn rho(&self, r: f64) -> f64 {
        match *self {
            LossKind::SquaredError => 0.5 * r * r,
            LossKind::Huber { delta } => {
                let a = r.abs();
                if a <= delta {
                    0.5 * r * r
                } else {
                    delta * (a - 0.5 * delta)
                }
            }
            LossKind::Welsch { c } => 0.5 * c * c * (1.0 - (-(r * r) / (c * c)).exp()),
            LossKind::Tukey { c } => {
                if r.abs() >= c {
                    c * c / 6.0
                } else {
                    let u = 1.0 - (r / c).powi(2);
                    c * c / 6.0 * (1.0 - u * u * u)
                }
            }
        }
    }

    #[inline]
    pub fn psi(&self, r: f64) -> f64 {
        match *self {
            LossKind::SquaredError => r,
            LossKind::Huber { delta } => r.clamp(-delta, delta),
            LossKind::Welsch { c } => r * (-(r * r) / (c * c)).exp(),
            LossKind::Tukey { c } => {
                if r.abs() >= c {
                    0.0
                } else {
                    let u = 1.0 - (r / c).powi(2);
                    r * u * u
                }
            }
        }
    }

    #[inline]
    pub fn psi_prime(&self, r: f64) -> f64 {
        match *self {
            LossKind::SquaredError => 1.0,
            LossKind::Huber { delta } => {
                if r.abs() <= delta {
                    1.0
                } else {
                    0.0
                }
            }
            LossKind::Welsch { c } => {
                let z = r * r / (c * c);
                (-z).exp() * (1.0 - 2.0 * z)
            }
            LossKind::Tukey { c } => {
                if r.abs() >= c {
                    0.0
                } else {
                    let z = (r / c).powi(2);
                    (1.0 - z) * (1.0 - 5.0 * z)
                }
            }
        }
    }
}

/// Huber's minimax tuning constant for ε-contamination of N(0, 1):
/// the root of φ(δ)/δ − (1 − Φ(δ)) = ε / (2(1 − ε)) on [1e−6, 10].
pub fn minimax_delta(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
    }
    let target = epsilon / (2.0 * (1.0 - epsilon));
    brent(
        |d| minimax_residual(d, 0.0) - target,
        1e-6,
        10.0,
        1e-15,
        500,
    )
}

/// Left-hand side of the minimax equation minus `rhs`.
pub fn minimax_residual(delta: f64, rhs: f64) -> f64 {
    normal_pdf(delta) / delta - normal_sf(delta) - rhs
}

/// Asymptotic relative efficiency of the Huber estimator at the Gaussian:
/// (E[ψ′])² / Var[ψ], evaluated by quadrature on [−12, 12].
pub fn huber_are(delta: f64) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    const TOL: f64 = 1e-13;
    let loss = LossKind::Huber { delta };
    let d = delta.min(12.0);
    let mut e_psi_prime = integrate(normal_pdf, -d, d, TOL);
    let inner = integrate(|r| loss.psi(r).powi(2) * normal_pdf(r), -d, d, TOL);
    let mut var_psi = inner;
    if d < 12.0 {
        let tail = integrate(|r| loss.psi(r).powi(2) * normal_pdf(r), d, 12.0, TOL);
        var_psi += 2.0 * tail;
    } else {
        e_psi_prime = e_psi_prime.min(1.0);
    }
    Ok(e_psi_prime * e_psi_prime / var_psi)
}

/// Median absolute deviation from the median; divided by 0.6745 when
/// `consistency_scaled`.
pub fn mad(values: &[f64], consistency_scaled: bool) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid("mad needs at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("mad input contains non-finite values"));
    }
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    let raw = median(&dev);
    if raw <= 0.0 {
        return Err(Error::degenerate("zero scale: median absolute deviation is 0"));
    }
    Ok(if consistency_scaled { raw / MAD_CONSISTENCY } else { raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn welsch_identity_case() {
        let e = LossKind::Welsch { c: 1.34 }.evaluate(0.0).unwrap();
        assert_eq!((e.rho, e.psi, e.psi_prime), (0.0, 0.0, 1.0));
    }

    #[test]
    fn welsch_psi_peaks_at_c_over_root2() {
        let c = 1.34;
        let loss = LossKind::Welsch { c };
        let r_star = c / 2f64.sqrt();
        let peak = c * (-0.5f64).exp() / 2f64.sqrt();
        assert_abs_diff_eq!(loss.psi(r_star), peak, epsilon = 1e-15);
        assert_abs_diff_eq!(loss.psi_prime(r_star), 0.0, epsilon = 1e-15);
        assert!(loss.psi(r_star * 1.01) < peak && loss.psi(r_star * 0.99) < peak);
    }

    #[test]
    fn welsch_limits() {
        let c = 1.34;
        let e = LossKind::Welsch { c }.evaluate(1e3).unwrap();
        assert_abs_diff_eq!(e.rho, c * c / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.psi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn huber_saturates() {
        assert_eq!(LossKind::Huber { delta: 1.345 }.psi(3.0), 1.345);
        assert_eq!(LossKind::Huber { delta: 1.345 }.psi(-3.0), -1.345);
    }

    #[test]
    fn tukey_is_flat_beyond_c() {
        let t = LossKind::Tukey { c: TUKEY_C };
        assert_abs_diff_eq!(t.rho(10.0), TUKEY_C * TUKEY_C / 6.0);
        assert_eq!(t.psi(10.0), 0.0);
        assert_abs_diff_eq!(t.rho(TUKEY_C - 1e-9), TUKEY_C * TUKEY_C / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(LossKind::Welsch { c: 0.0 }.evaluate(1.0).is_err());
        assert!(LossKind::Huber { delta: f64::NAN }.evaluate(1.0).is_err());
        assert!(LossKind::SquaredError.evaluate(f64::INFINITY).is_err());
        assert!(minimax_delta(0.0).is_err());
        assert!(minimax_delta(0.5).is_err());
        assert!(huber_are(0.0).is_err());
    }

    #[test]
    fn minimax_root_solves_its_equation() {
        for eps in [0.01, 0.05, 0.1, 0.25, 0.4, 0.49] {
            let d = minimax_delta(eps).unwrap();
            let res = minimax_residual(d, eps / (2.0 * (1.0 - eps)));
            assert!(res.abs() < 1e-10, "eps {eps}: residual {res}");
        }
    }

    #[test]
    fn minimax_matches_huber_classical_table() {
        // Huber (1964) / Huber & Ronchetti Table 4.1 values for the same equation.
        for (eps, k) in [(0.01, 1.945), (0.05, 1.399), (0.1, 1.140), (0.4, 0.550)] {
            assert_abs_diff_eq!(minimax_delta(eps).unwrap(), k, epsilon = 1.5e-3);
        }
    }

    #[test]
    fn minimax_strictly_decreasing() {
        let grid: Vec<f64> = (1..=50).map(|i| 0.499 * i as f64 / 50.0).collect();
        let ds: Vec<f64> = grid.iter().map(|&e| minimax_delta(e).unwrap()).collect();
        assert!(ds.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn are_reference_values() {
        assert_abs_diff_eq!(huber_are(1.345).unwrap(), 0.950, epsilon = 1e-3);
        assert_abs_diff_eq!(huber_are(1.0).unwrap(), 0.903, epsilon = 1e-3);
        assert_abs_diff_eq!(huber_are(0.5).unwrap(), 0.792, epsilon = 1e-3);
        assert_abs_diff_eq!(huber_are(10.0).unwrap(), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn are_matches_closed_form() {
        // E[ψ′] = 2Φ(δ) − 1, Var ψ = (2Φ(δ) − 1) − 2δφ(δ) + 2δ²(1 − Φ(δ)).
        for delta in [0.3, 0.5, 1.0, 1.345, 2.0, 4.0] {
            let p = 1.0 - 2.0 * normal_sf(delta);
            let v = p - 2.0 * delta * normal_pdf(delta) + 2.0 * delta * delta * normal_sf(delta);
            assert_abs_diff_eq!(huber_are(delta).unwrap(), p * p / v, epsilon = 1e-6);
        }
    }

    #[test]
    fn are_is_monotone() {
        let vals: Vec<f64> = (1..60).map(|i| huber_are(0.1 * i as f64).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn mad_cases() {
        assert_abs_diff_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 5.0], false).unwrap(), 1.0);
        assert!(matches!(mad(&[5.0, 5.0, 5.0], false), Err(Error::Degenerate(_))));
        assert!(mad(&[1.0], true).is_err());
    }

    #[test]
    fn mad_scaled_is_consistent_for_normal() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_abs_diff_eq!(mad(&v, true).unwrap(), 1.0, epsilon = 0.02);
    }

    fn kind_strategy() -> impl Strategy<Value = LossKind> {
        prop_oneof![
            Just(LossKind::SquaredError),
            (0.2f64..3.0).prop_map(|delta| LossKind::Huber { delta }),
            (0.2f64..5.0).prop_map(|c| LossKind::Welsch { c }),
            (1.0f64..6.0).prop_map(|c| LossKind::Tukey { c }),
        ]
    }

    fn kinks(kind: &LossKind) -> Vec<f64> {
        match *kind {
            LossKind::Huber { delta } => vec![delta, -delta],
            LossKind::Tukey { c } => vec![c, -c],
            _ => vec![],
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn derivatives_match_finite_differences(kind in kind_strategy(), r in -8.0f64..8.0) {
            let h = 1e-5;
            prop_assume!(kinks(&kind).iter().all(|k| (r - k).abs() > 10.0 * h));
            let fd_psi = (kind.rho(r + h) - kind.rho(r - h)) / (2.0 * h);
            let fd_psi_prime = (kind.psi(r + h) - kind.psi(r - h)) / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
            prop_assert!(rel(fd_psi, kind.psi(r)) < 1e-6);
            prop_assert!(rel(fd_psi_prime, kind.psi_prime(r)) < 1e-6);
        }

        #[test]
        fn welsch_psi_bounded(c in 0.1f64..10.0, r in -1e3f64..1e3) {
            let bound = c * (-0.5f64).exp() / 2f64.sqrt();
            let loss = LossKind::Welsch { c };
            prop_assert!(loss.psi(r).abs() <= bound * (1.0 + 1e-12));
        }

        #[test]
        fn origin_invariants(kind in kind_strategy()) {
            let e = kind.evaluate(0.0).unwrap();
            prop_assert_eq!(e.rho, 0.0);
            prop_assert_eq!(e.psi, 0.0);
            prop_assert!(e.psi_prime > 0.0);
        }
    }
}
