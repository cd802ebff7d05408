//! Mean functions m(t) = α₀ + Σ α_d b_d(t) over pre-specified basis sets.

use serde::{Deserialize, Serialize};

use crate::error::{LgpError, Result};

/// Basis family, without the evaluation horizon.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisKind {
    Constant,
    Polynomial { degree: usize },
    /// Truncated-power cubic spline: t, t², t³, (t − ξ_1)³₊, …
    CubicSpline { knots: Vec<f64> },
}

/// A basis on `[0, horizon]`. An infinite horizon means "not yet bound to
/// data"; domain checks are skipped until it is resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub kind: BasisKind,
    pub horizon: f64,
}

impl BasisSet {
    pub fn constant() -> Self {
        BasisSet {
            kind: BasisKind::Constant,
            horizon: f64::INFINITY,
        }
    }

    pub fn polynomial(degree: usize, horizon: f64) -> Result<Self> {
        let b = BasisSet {
            kind: BasisKind::Polynomial { degree },
            horizon,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn cubic_spline(knots: Vec<f64>, horizon: f64) -> Result<Self> {
        let b = BasisSet {
            kind: BasisKind::CubicSpline { knots },
            horizon,
        };
        b.validate()?;
        Ok(b)
    }

    /// Cubic spline with `n_knots` knots at equally spaced quantiles of the
    /// pooled observation times.
    pub fn cubic_spline_quantile_knots(
        pooled_times: &[f64],
        n_knots: usize,
        horizon: f64,
    ) -> Result<Self> {
        if pooled_times.is_empty() || n_knots == 0 {
            return Err(LgpError::InvalidModel(
                "quantile knots need observation times and at least one knot".into(),
            ));
        }
        let mut sorted = pooled_times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let knots = (1..=n_knots)
            .map(|k| quantile_sorted(&sorted, k as f64 / (n_knots + 1) as f64))
            .collect();
        Self::cubic_spline(knots, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(LgpError::InvalidModel(format!(
                "basis horizon must be positive, got {}",
                self.horizon
            )));
        }
        match &self.kind {
            BasisKind::Constant => Ok(()),
            BasisKind::Polynomial { degree } => {
                if *degree < 1 {
                    return Err(LgpError::InvalidModel("polynomial degree must be >= 1".into()));
                }
                Ok(())
            }
            BasisKind::CubicSpline { knots } => {
                if knots.is_empty() {
                    return Err(LgpError::InvalidModel(
                        "cubic spline needs at least one knot".into(),
                    ));
                }
                if knots.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(LgpError::InvalidModel("spline knots must increase strictly".into()));
                }
                if knots.iter().any(|&k| !(k > 0.0 && k < self.horizon)) {
                    return Err(LgpError::InvalidModel(format!(
                        "spline knots must lie inside (0, {})",
                        self.horizon
                    )));
                }
                Ok(())
            }
        }
    }

    /// Number of non-intercept basis functions D.
    pub fn dim(&self) -> usize {
        match &self.kind {
            BasisKind::Constant => 0,
            BasisKind::Polynomial { degree } => *degree,
            BasisKind::CubicSpline { knots } => 3 + knots.len(),
        }
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(LgpError::Domain {
                t,
                horizon: self.horizon,
            });
        }
        let slack = 1e-9 * self.horizon.max(1.0);
        if t < -slack || (self.horizon.is_finite() && t > self.horizon + slack) {
            return Err(LgpError::Domain {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// (b_1(t), …, b_D(t)); empty for the constant basis.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.check_domain(t)?;
        let mut out = Vec::with_capacity(self.dim());
        self.push_eval(t, &mut out);
        Ok(out)
    }

    fn push_eval(&self, t: f64, out: &mut Vec<f64>) {
        match &self.kind {
            BasisKind::Constant => {}
            BasisKind::Polynomial { degree } => {
                let mut p = 1.0;
                for _ in 0..*degree {
                    p *= t;
                    out.push(p);
                }
            }
            BasisKind::CubicSpline { knots } => {
                out.extend([t, t * t, t * t * t]);
                out.extend(knots.iter().map(|&k| {
                    let d = t - k;
                    if d > 0.0 {
                        d * d * d
                    } else {
                        0.0
                    }
                }));
            }
        }
    }

    /// Per-column scale T^{deg}; dividing a design column by its scale gives
    /// the basis evaluated on time rescaled to [0, 1].
    pub fn column_scales(&self) -> Vec<f64> {
        let h = if self.horizon.is_finite() {
            self.horizon
        } else {
            1.0
        };
        match &self.kind {
            BasisKind::Constant => vec![],
            BasisKind::Polynomial { degree } => (1..=*degree).map(|d| h.powi(d as i32)).collect(),
            BasisKind::CubicSpline { knots } => {
                let mut s = vec![h, h * h, h * h * h];
                s.extend(std::iter::repeat_n(h * h * h, knots.len()));
                s
            }
        }
    }
}

/// m(t) = α₀ + Σ α_d b_d(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeanConfig", into = "MeanConfig")]
pub struct MeanSpec {
    pub basis: BasisSet,
    pub coefficients: Vec<f64>,
}

impl MeanSpec {
    pub fn constant(alpha0: f64) -> Self {
        MeanSpec {
            basis: BasisSet::constant(),
            coefficients: vec![alpha0],
        }
    }

    pub fn new(basis: BasisSet, coefficients: Vec<f64>) -> Result<Self> {
        let m = MeanSpec {
            basis,
            coefficients,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        if self.coefficients.len() != self.basis.dim() + 1 {
            return Err(LgpError::InvalidModel(format!(
                "mean has {} coefficients, basis needs {}",
                self.coefficients.len(),
                self.basis.dim() + 1
            )));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(LgpError::InvalidModel("non-finite mean coefficient".into()));
        }
        Ok(())
    }

    pub fn n_coefficients(&self) -> usize {
        self.coefficients.len()
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let b = self.basis.eval(t)?;
        Ok(self.coefficients[0]
            + b.iter()
                .zip(&self.coefficients[1..])
                .map(|(x, a)| x * a)
                .sum::<f64>())
    }

    /// Design row (1, b_1(t), …, b_D(t)).
    pub fn design_row(&self, t: f64) -> Result<Vec<f64>> {
        self.basis.check_domain(t)?;
        let mut row = Vec::with_capacity(self.basis.dim() + 1);
        row.push(1.0);
        self.basis.push_eval(t, &mut row);
        Ok(row)
    }

    /// Scale of each coefficient: 1 for the intercept, then `column_scales`.
    pub fn coefficient_scales(&self) -> Vec<f64> {
        let mut s = vec![1.0];
        s.extend(self.basis.column_scales());
        s
    }

    /// Fill in an unresolved horizon.
    pub fn bind_horizon(&mut self, horizon: f64) {
        if !self.basis.horizon.is_finite() && !matches!(self.basis.kind, BasisKind::Constant) {
            self.basis.horizon = horizon;
        }
    }
}

pub fn basis_eval(basis: &BasisSet, t: f64) -> Result<Vec<f64>> {
    basis.eval(t)
}

pub fn mean_eval(spec: &MeanSpec, t: f64) -> Result<f64> {
    spec.eval(t)
}

pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Configuration-file shape of a mean function.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanConfig {
    Constant {
        alpha0: f64,
    },
    Polynomial {
        degree: usize,
        coeffs: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon: Option<f64>,
    },
    CubicSpline {
        knots: Vec<f64>,
        coeffs: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon: Option<f64>,
    },
}

impl TryFrom<MeanConfig> for MeanSpec {
    type Error = LgpError;

    fn try_from(c: MeanConfig) -> Result<Self> {
        let horizon = |h: Option<f64>| h.unwrap_or(f64::INFINITY);
        match c {
            MeanConfig::Constant { alpha0 } => Ok(MeanSpec::constant(alpha0)),
            MeanConfig::Polynomial {
                degree,
                coeffs,
                horizon: h,
            } => MeanSpec::new(BasisSet::polynomial(degree, horizon(h))?, coeffs),
            MeanConfig::CubicSpline {
                knots,
                coeffs,
                horizon: h,
            } => MeanSpec::new(BasisSet::cubic_spline(knots, horizon(h))?, coeffs),
        }
    }
}

impl From<MeanSpec> for MeanConfig {
    fn from(m: MeanSpec) -> Self {
        let horizon = m.basis.horizon.is_finite().then_some(m.basis.horizon);
        match m.basis.kind {
            BasisKind::Constant => MeanConfig::Constant {
                alpha0: m.coefficients[0],
            },
            BasisKind::Polynomial { degree } => MeanConfig::Polynomial {
                degree,
                coeffs: m.coefficients,
                horizon,
            },
            BasisKind::CubicSpline { knots } => MeanConfig::CubicSpline {
                knots,
                coeffs: m.coefficients,
                horizon,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn polynomial_basis_values() {
        let b = BasisSet::polynomial(2, 10.0).unwrap();
        assert_eq!(basis_eval(&b, 2.0).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn spline_truncated_powers() {
        let b = BasisSet::cubic_spline(vec![1.0], 5.0).unwrap();
        assert_eq!(basis_eval(&b, 2.0).unwrap(), vec![2.0, 4.0, 8.0, 1.0]);
        let b = BasisSet::cubic_spline(vec![1.0, 3.0], 5.0).unwrap();
        let v = basis_eval(&b, 0.5).unwrap();
        assert_eq!(&v[3..], &[0.0, 0.0]);
    }

    #[test]
    fn constant_and_polynomial_means() {
        let m = MeanSpec::constant(1.5);
        for t in [0.0, 3.3, 24.9] {
            assert_eq!(mean_eval(&m, t).unwrap(), 1.5);
        }
        let m = MeanSpec::new(BasisSet::polynomial(1, 10.0).unwrap(), vec![0.0, 1.0]).unwrap();
        assert_eq!(mean_eval(&m, 3.0).unwrap(), 3.0);
        let m =
            MeanSpec::new(BasisSet::polynomial(2, 10.0).unwrap(), vec![1.0, -1.0, 0.5]).unwrap();
        assert_eq!(mean_eval(&m, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn domain_errors() {
        let b = BasisSet::polynomial(2, 10.0).unwrap();
        assert!(matches!(b.eval(-0.1), Err(LgpError::Domain { .. })));
        assert!(matches!(b.eval(10.5), Err(LgpError::Domain { .. })));
        assert!(b.eval(10.0).is_ok());
    }

    #[test]
    fn invalid_bases_rejected() {
        assert!(BasisSet::polynomial(0, 1.0).is_err());
        assert!(BasisSet::cubic_spline(vec![], 1.0).is_err());
        assert!(BasisSet::cubic_spline(vec![2.0, 1.0], 5.0).is_err());
        assert!(BasisSet::cubic_spline(vec![5.0], 5.0).is_err());
        assert!(MeanSpec::new(BasisSet::polynomial(2, 1.0).unwrap(), vec![1.0]).is_err());
    }

    #[test]
    fn spline_mean_is_c2_across_knots() {
        let m = MeanSpec::new(
            BasisSet::cubic_spline(vec![2.0, 5.0], 10.0).unwrap(),
            vec![0.3, 1.0, -0.4, 0.05, 0.7, -1.2],
        )
        .unwrap();
        let h = 1e-4;
        let f = |t: f64| m.eval(t).unwrap();
        let second = |t: f64| (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h);
        for &k in &[2.0, 5.0] {
            // one-sided second differences extrapolated to the knot
            let left = 2.0 * second(k - h) - second(k - 2.0 * h);
            let right = 2.0 * second(k + h) - second(k + 2.0 * h);
            assert!((left - right).abs() < 1e-4, "knot {k}: {left} vs {right}");
        }
        // the third derivative does jump, so the check is not vacuous
        let third = |t: f64| (second(t + h) - second(t - h)) / (2.0 * h);
        assert!((third(2.0 + 3.0 * h) - third(2.0 - 3.0 * h)).abs() > 1.0);
    }

    #[test]
    fn quantile_knots_are_interior() {
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.25).collect();
        let b = BasisSet::cubic_spline_quantile_knots(&times, 3, 25.0).unwrap();
        match &b.kind {
            BasisKind::CubicSpline { knots } => {
                assert_eq!(knots.len(), 3);
                assert!((knots[1] - 12.375).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn config_round_trip() {
        let json = r#"{"kind":"polynomial","degree":2,"coeffs":[1.0,2.0,3.0],"horizon":4.0}"#;
        let m: MeanSpec = serde_json::from_str(json).unwrap();
        assert_eq!(m.basis.dim(), 2);
        let back = serde_json::to_string(&m).unwrap();
        let again: MeanSpec = serde_json::from_str(&back).unwrap();
        assert_eq!(m, again);
        let bad = r#"{"kind":"constant","alpha0":1.0,"extra":2}"#;
        assert!(serde_json::from_str::<MeanSpec>(bad).is_err());
    }

    proptest! {
        #[test]
        fn mean_is_linear_in_coefficients(
            coeffs in proptest::collection::vec(-3.0f64..3.0, 4),
            d in 0usize..4,
            beta in -2.0f64..2.0,
            t in 0.0f64..10.0,
        ) {
            let basis = BasisSet::cubic_spline(vec![4.0], 10.0).unwrap();
            let mut c5 = coeffs.clone();
            c5.push(0.2);
            let m = MeanSpec::new(basis.clone(), c5.clone()).unwrap();
            let mut shifted = c5.clone();
            shifted[d + 1] += beta;
            let m2 = MeanSpec::new(basis.clone(), shifted).unwrap();
            let bd = basis.eval(t).unwrap()[d];
            let diff = m2.eval(t).unwrap() - m.eval(t).unwrap();
            prop_assert!((diff - beta * bd).abs() < 1e-9 * (1.0 + (beta * bd).abs()));
        }
    }
}
