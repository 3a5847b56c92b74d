//! The doubly-robust class `ψ = E[H(b, p)]` with
//! `H(b, p) = B·P·h1 + B·h2 + P·h3 + h4`, where `h1` has a single sign.
//!
//! Shipped members: the missing-at-random mean (and the two arms of the
//! treatment effect built from it) and the expected conditional covariance.

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result, SignKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FunctionalId {
    MarMean,
    Ate,
    ExpectedCondCov,
}

impl FunctionalId {
    pub fn as_str(&self) -> &'static str {
        match self {
            FunctionalId::MarMean => "mar_mean",
            FunctionalId::Ate => "ate",
            FunctionalId::ExpectedCondCov => "ecc",
        }
    }
}

impl fmt::Display for FunctionalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FunctionalId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mar_mean" | "mar" => Ok(FunctionalId::MarMean),
            "ate" => Ok(FunctionalId::Ate),
            "ecc" | "expected_cond_cov" => Ok(FunctionalId::ExpectedCondCov),
            other => Err(Error::Config(format!("unknown functional '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    /// Mean of `Y` among records with indicator `A` (or `1 - A` if `!treated`).
    Mar { treated: bool },
    Ecc,
}

/// One member of the class, fixed by its `h` quadruple.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FunctionalSpec {
    pub id: FunctionalId,
    kind: Kind,
    /// `true` when `h1` is the nowhere-positive kind.
    pub sign_flag: bool,
    pub description: String,
}

/// Per-record residuals at the estimated nuisances.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub eps_b: Vec<f64>,
    pub eps_p: Vec<f64>,
    pub abs_h1: Vec<f64>,
}

pub fn mar_mean_spec() -> FunctionalSpec {
    FunctionalSpec {
        id: FunctionalId::MarMean,
        kind: Kind::Mar { treated: true },
        sign_flag: true,
        description: "mean of Y missing at random given X: h = (-A, 1, AY, 0)".into(),
    }
}

pub fn expected_cond_cov_spec() -> FunctionalSpec {
    FunctionalSpec {
        id: FunctionalId::ExpectedCondCov,
        kind: Kind::Ecc,
        sign_flag: false,
        description: "E[Cov(A, Y | X)]: h = (1, -A, -Y, AY)".into(),
    }
}

/// Arm-1 and arm-0 mean specs; the effect is arm 1 minus arm 0.
pub fn ate_spec() -> (FunctionalSpec, FunctionalSpec) {
    let arm1 = FunctionalSpec {
        id: FunctionalId::Ate,
        kind: Kind::Mar { treated: true },
        sign_flag: true,
        description: "treated-arm mean: h = (-A, 1, AY, 0)".into(),
    };
    let arm0 = FunctionalSpec {
        id: FunctionalId::Ate,
        kind: Kind::Mar { treated: false },
        sign_flag: true,
        description: "control-arm mean: h = (-(1-A), 1, (1-A)Y, 0)".into(),
    };
    (arm1, arm0)
}

impl FunctionalSpec {
    /// `(h1, h2, h3, h4)` at a record with indicator `a` and outcome `y`.
    #[inline]
    pub fn h(&self, a: f64, y: f64) -> [f64; 4] {
        match self.kind {
            Kind::Mar { treated } => {
                let ind = if treated { a } else { 1.0 - a };
                [-ind, 1.0, ind * y, 0.0]
            }
            Kind::Ecc => [1.0, -a, -y, a * y],
        }
    }

    /// `H(b, p)` at one record.
    #[inline]
    pub fn h_value(&self, b: f64, p: f64, a: f64, y: f64) -> f64 {
        let [h1, h2, h3, h4] = self.h(a, y);
        b * p * h1 + b * h2 + p * h3 + h4
    }

    /// `σ = (-1)^{I(h1 ≤ 0)}`.
    pub fn sign(&self) -> f64 {
        if self.sign_flag {
            -1.0
        } else {
            1.0
        }
    }

    pub fn sign_kind(&self) -> SignKind {
        if self.sign_flag {
            SignKind::NonPositive
        } else {
            SignKind::NonNegative
        }
    }

    /// Whether this spec is an arm mean (so `p = 1/π` and `p̂ ≥ 1`).
    pub fn is_inverse_weight(&self) -> bool {
        matches!(self.kind, Kind::Mar { .. })
    }

    /// Whether the spec needs `Y` on every record.
    pub fn needs_all_outcomes(&self) -> bool {
        !matches!(self.kind, Kind::Mar { treated: true }) || self.id == FunctionalId::Ate
    }

    /// `E[|h1| | X = x]` given the propensity `π(x) = P(A = 1 | X = x)`;
    /// the weight turning `f` into `g`.
    pub fn g_weight(&self, pi: f64) -> f64 {
        match self.kind {
            Kind::Mar { treated: true } => pi,
            Kind::Mar { treated: false } => 1.0 - pi,
            Kind::Ecc => 1.0,
        }
    }

    /// Fails on the first record where `h1` has the wrong sign.
    pub fn check_signs(&self, data: &Dataset) -> Result<()> {
        for i in 0..data.len() {
            let h1 = self.h(data.a[i], data.y[i])[0];
            let bad = match self.sign_kind() {
                SignKind::NonPositive => h1 > 0.0,
                SignKind::NonNegative => h1 < 0.0,
            };
            if bad || !h1.is_finite() {
                return Err(Error::SignViolation {
                    record: i,
                    value: h1,
                    expected: self.sign_kind(),
                });
            }
        }
        Ok(())
    }

    /// `|h1(W_i)|` for every record.
    pub fn abs_h1(&self, data: &Dataset) -> Vec<f64> {
        (0..data.len()).map(|i| self.h(data.a[i], data.y[i])[0].abs()).collect()
    }

    /// `ε_b = b̂·h1 + h3`, `ε_p = h1·p̂ + h2`, `|h1|` on every record.
    pub fn residuals(
        &self,
        data: &Dataset,
        b_hat: &(dyn Fn(&[f64]) -> f64 + Sync),
        p_hat: &(dyn Fn(&[f64]) -> f64 + Sync),
    ) -> Result<Residuals> {
        let n = data.len();
        let mut out = Residuals {
            eps_b: Vec::with_capacity(n),
            eps_p: Vec::with_capacity(n),
            abs_h1: Vec::with_capacity(n),
        };
        for i in 0..n {
            let x = data.point(i);
            let (b, p) = (b_hat(x), p_hat(x));
            if !b.is_finite() || !p.is_finite() {
                return Err(Error::NonFinite(format!("nuisance value at record {i}")));
            }
            let [h1, h2, h3, _] = self.h(data.a[i], data.y[i]);
            out.eps_b.push(b * h1 + h3);
            out.eps_p.push(h1 * p + h2);
            out.abs_h1.push(h1.abs());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mar_quadruple() {
        let s = mar_mean_spec();
        assert_eq!(s.h(0.0, 0.0), [0.0, 1.0, 0.0, 0.0]);
        let h = s.h(1.0, 1.0);
        assert_eq!((h[0], h[2]), (-1.0, 1.0));
        assert!(s.sign_flag);
    }

    #[test]
    fn mar_h_is_augmented_ipw() {
        let s = mar_mean_spec();
        let (b, p, y) = (0.3, 2.5, 1.0);
        assert!((s.h_value(b, p, 1.0, y) - (p * (y - b) + b)).abs() < 1e-15);
        assert_eq!(s.h_value(b, p, 0.0, 0.0), b);
    }

    #[test]
    fn ecc_h_is_residual_product() {
        let s = expected_cond_cov_spec();
        let (b, p, a, y) = (0.4, 0.7, 1.0, 0.25);
        assert!((s.h_value(b, p, a, y) - (a - p) * (y - b)).abs() < 1e-15);
        assert!(!s.sign_flag);
    }

    #[test]
    fn arm_zero_swaps_indicator() {
        let (arm1, arm0) = ate_spec();
        assert_eq!(arm0.h(0.0, 0.6), arm1.h(1.0, 0.6));
        assert_eq!(arm0.g_weight(0.3), 0.7);
    }

    #[test]
    fn zero_nuisance_residuals() {
        let ds = Dataset::new(vec![1.0, 0.0], vec![0.7, 0.0], vec![0.2, 0.9], 1).unwrap();
        let r = mar_mean_spec().residuals(&ds, &|_| 0.0, &|_| 0.0).unwrap();
        assert_eq!(r.eps_b, vec![0.7, 0.0]);
        assert_eq!(r.eps_p, vec![1.0, 1.0]);
        assert_eq!(r.abs_h1, vec![1.0, 0.0]);
    }

    #[test]
    fn true_outcome_regression_gives_weighted_error() {
        let ds = Dataset::new(vec![1.0], vec![1.0], vec![0.5], 1).unwrap();
        let r = mar_mean_spec().residuals(&ds, &|_| 0.3, &|_| 2.0).unwrap();
        // A (Y - b)
        assert!((r.eps_b[0] - 0.7).abs() < 1e-15);
        assert!((r.eps_p[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn sign_violation_detected() {
        let ds = Dataset::new(vec![1.0, 0.0], vec![1.0, 0.0], vec![0.2, 0.9], 1).unwrap();
        assert!(mar_mean_spec().check_signs(&ds).is_ok());
        assert!(expected_cond_cov_spec().check_signs(&ds).is_ok());
    }

    #[test]
    fn non_finite_nuisance_is_an_error() {
        let ds = Dataset::new(vec![1.0], vec![1.0], vec![0.5], 1).unwrap();
        assert!(mar_mean_spec().residuals(&ds, &|_| f64::NAN, &|_| 1.0).is_err());
    }
}
