//! Covariance kernels K(t, t′) for the latent process.
//!
//! Free-parameter layout, shared with the optimizer:
//!
//! | kernel          | free vector                 |
//! |-----------------|-----------------------------|
//! | SE, exponential | (ln c, ln κ)                |
//! | periodic        | (ln c, ln κ, ln p)          |
//! | basis low-rank  | (ω_1, …, ω_H)               |
//!
//! The exponential kernel is c²·exp(−|t−t′|/(2κ²)), with 2κ² in the
//! denominator rather than the more common κ.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::basis::{BasisKind, BasisSet};
use crate::error::{LgpError, Result};
use crate::gaussian::factor_with_jitter;

/// Correlations below e^-300 are stored as exact zeros, so products of Gram
/// entries stay out of the subnormal range.
const DECAY_CUTOFF: f64 = 300.0;

fn decay(arg: f64) -> f64 {
    if arg < DECAY_CUTOFF {
        (-arg).exp()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    #[serde(rename = "se")]
    SquaredExponential { c: f64, kappa: f64 },
    Exponential { c: f64, kappa: f64 },
    Periodic { c: f64, kappa: f64, p: f64 },
    /// K(t,t′) = Σ_h ω_h² φ_h(t) φ_h(t′) with φ = (1, b_1, …, b_D).
    BasisLowRank {
        weights: Vec<f64>,
        #[serde(with = "basis_serde")]
        basis: BasisSet,
    },
}

impl KernelSpec {
    pub fn se(c: f64, kappa: f64) -> Self {
        KernelSpec::SquaredExponential { c, kappa }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LgpError::InvalidModel(format!(
                    "kernel parameter {name} must be positive and finite, got {v}"
                )))
            }
        };
        match self {
            KernelSpec::SquaredExponential { c, kappa } | KernelSpec::Exponential { c, kappa } => {
                pos("c", *c)?;
                pos("kappa", *kappa)
            }
            KernelSpec::Periodic { c, kappa, p } => {
                pos("c", *c)?;
                pos("kappa", *kappa)?;
                pos("p", *p)
            }
            KernelSpec::BasisLowRank { weights, basis } => {
                basis.validate()?;
                if weights.len() != basis.dim() + 1 {
                    return Err(LgpError::InvalidModel(format!(
                        "basis kernel has {} weights but {} basis functions",
                        weights.len(),
                        basis.dim() + 1
                    )));
                }
                if weights.iter().any(|w| !w.is_finite()) {
                    return Err(LgpError::InvalidModel("non-finite basis kernel weight".into()));
                }
                Ok(())
            }
        }
    }

    pub fn is_stationary(&self) -> bool {
        !matches!(self, KernelSpec::BasisLowRank { .. })
    }

    /// Scale parameter c, for kernels that have one.
    pub fn scale(&self) -> Option<f64> {
        match self {
            KernelSpec::SquaredExponential { c, .. }
            | KernelSpec::Exponential { c, .. }
            | KernelSpec::Periodic { c, .. } => Some(*c),
            KernelSpec::BasisLowRank { .. } => None,
        }
    }

    pub fn with_scale(&self, new_c: f64) -> Self {
        let mut k = self.clone();
        match &mut k {
            KernelSpec::SquaredExponential { c, .. }
            | KernelSpec::Exponential { c, .. }
            | KernelSpec::Periodic { c, .. } => *c = new_c,
            KernelSpec::BasisLowRank { .. } => {}
        }
        k
    }

    pub fn n_free(&self) -> usize {
        match self {
            KernelSpec::SquaredExponential { .. } | KernelSpec::Exponential { .. } => 2,
            KernelSpec::Periodic { .. } => 3,
            KernelSpec::BasisLowRank { weights, .. } => weights.len(),
        }
    }

    pub fn free_names(&self) -> Vec<String> {
        match self {
            KernelSpec::SquaredExponential { .. } | KernelSpec::Exponential { .. } => {
                vec!["ln_c".into(), "ln_kappa".into()]
            }
            KernelSpec::Periodic { .. } => vec!["ln_c".into(), "ln_kappa".into(), "ln_p".into()],
            KernelSpec::BasisLowRank { weights, .. } => {
                (1..=weights.len()).map(|h| format!("omega{h}")).collect()
            }
        }
    }

    pub fn to_free(&self) -> Vec<f64> {
        match self {
            KernelSpec::SquaredExponential { c, kappa } | KernelSpec::Exponential { c, kappa } => {
                vec![c.ln(), kappa.ln()]
            }
            KernelSpec::Periodic { c, kappa, p } => vec![c.ln(), kappa.ln(), p.ln()],
            KernelSpec::BasisLowRank { weights, .. } => weights.clone(),
        }
    }

    /// Same kernel family with parameters taken from a free vector.
    pub fn from_free(&self, v: &[f64]) -> Self {
        match self {
            KernelSpec::SquaredExponential { .. } => KernelSpec::SquaredExponential {
                c: v[0].exp(),
                kappa: v[1].exp(),
            },
            KernelSpec::Exponential { .. } => KernelSpec::Exponential {
                c: v[0].exp(),
                kappa: v[1].exp(),
            },
            KernelSpec::Periodic { .. } => KernelSpec::Periodic {
                c: v[0].exp(),
                kappa: v[1].exp(),
                p: v[2].exp(),
            },
            KernelSpec::BasisLowRank { basis, .. } => KernelSpec::BasisLowRank {
                weights: v.to_vec(),
                basis: basis.clone(),
            },
        }
    }

    fn basis_row(basis: &BasisSet, t: f64) -> Vec<f64> {
        let mut row = vec![1.0];
        // domain is checked when the kernel is bound to data
        row.extend(basis.eval(t.clamp(0.0, basis.horizon)).unwrap_or_default());
        row
    }

    /// K(t, t′).
    pub fn eval(&self, t: f64, t2: f64) -> f64 {
        match self {
            KernelSpec::SquaredExponential { c, kappa } => {
                let d = t - t2;
                c * c * decay(d * d / (2.0 * kappa * kappa))
            }
            KernelSpec::Exponential { c, kappa } => {
                c * c * decay((t - t2).abs() / (2.0 * kappa * kappa))
            }
            KernelSpec::Periodic { c, kappa, p } => {
                let s = (PI * (t - t2).abs() / p).sin();
                c * c * decay(2.0 * s * s / (kappa * kappa))
            }
            KernelSpec::BasisLowRank { weights, basis } => {
                let a = Self::basis_row(basis, t);
                let b = Self::basis_row(basis, t2);
                weights
                    .iter()
                    .zip(a.iter().zip(&b))
                    .map(|(w, (x, y))| w * w * (x * y))
                    .sum()
            }
        }
    }

    /// ∂K(t,t′)/∂(free parameters), in the layout of `to_free`.
    pub fn gradient(&self, t: f64, t2: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.n_free()];
        self.gradient_into(t, t2, &mut g);
        g
    }

    fn gradient_into(&self, t: f64, t2: f64, g: &mut [f64]) {
        match self {
            KernelSpec::SquaredExponential { c, kappa } => {
                let d2 = (t - t2) * (t - t2);
                let k2 = kappa * kappa;
                let k = c * c * decay(d2 / (2.0 * k2));
                g[0] = 2.0 * k;
                g[1] = k * d2 / k2;
            }
            KernelSpec::Exponential { c, kappa } => {
                let d = (t - t2).abs();
                let k2 = kappa * kappa;
                let k = c * c * decay(d / (2.0 * k2));
                g[0] = 2.0 * k;
                g[1] = k * d / k2;
            }
            KernelSpec::Periodic { c, kappa, p } => {
                let r = (t - t2).abs();
                let u = PI * r / p;
                let (s, co) = u.sin_cos();
                let k2 = kappa * kappa;
                let k = c * c * decay(2.0 * s * s / k2);
                g[0] = 2.0 * k;
                g[1] = k * 4.0 * s * s / k2;
                g[2] = k * 4.0 * s * co * u / k2;
            }
            KernelSpec::BasisLowRank { weights, basis } => {
                let a = Self::basis_row(basis, t);
                let b = Self::basis_row(basis, t2);
                for (h, w) in weights.iter().enumerate() {
                    g[h] = 2.0 * w * a[h] * b[h];
                }
            }
        }
    }

    /// Σ_{a,b} W_ab ∂K(t_a,t_b)/∂η for every free parameter η.
    pub fn contract_gradient(&self, times: &[f64], weights: &DMatrix<f64>) -> Vec<f64> {
        let n = self.n_free();
        let mut out = vec![0.0; n];
        let mut g = vec![0.0; n];
        for a in 0..times.len() {
            // diagonal once, off-diagonal pairs twice (W symmetric)
            self.gradient_into(times[a], times[a], &mut g);
            for k in 0..n {
                out[k] += weights[(a, a)] * g[k];
            }
            for b in 0..a {
                self.gradient_into(times[a], times[b], &mut g);
                let w = weights[(a, b)] + weights[(b, a)];
                for k in 0..n {
                    out[k] += w * g[k];
                }
            }
        }
        out
    }

    /// Bind an unresolved basis horizon (basis low-rank kernels only).
    pub fn bind_horizon(&mut self, horizon: f64) {
        if let KernelSpec::BasisLowRank { basis, .. } = self {
            if !basis.horizon.is_finite() && !matches!(basis.kind, BasisKind::Constant) {
                basis.horizon = horizon;
            }
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, t: f64, t2: f64) -> f64 {
    spec.eval(t, t2)
}

pub fn kernel_gradient(spec: &KernelSpec, t: f64, t2: f64) -> Vec<f64> {
    spec.gradient(t, t2)
}

/// Raw (unjittered) kernel matrix between two point sets.
pub fn cross_cov(spec: &KernelSpec, a: &[f64], b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| spec.eval(a[i], b[j]))
}

/// Raw symmetric kernel matrix on one point set.
pub fn raw_gram(spec: &KernelSpec, times: &[f64]) -> DMatrix<f64> {
    let n = times.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval(times[i], times[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Kernel Gram matrix with its lower Cholesky factor.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub points: Vec<f64>,
    /// K(t_s, t_s′) + jitter·I.
    pub matrix: DMatrix<f64>,
    pub jitter_applied: f64,
    pub chol: Cholesky<f64, Dyn>,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Build the Gram matrix on `times`, adding the smallest jitter from the
/// ladder (0, 1e-10·s, 1e-9·s, …, 1e-4·s; s = largest diagonal entry) at
/// which the factorization succeeds.
pub fn gram(spec: &KernelSpec, times: &[f64]) -> Result<GramMatrix> {
    let matrix = raw_gram(spec, times);
    let (chol, jitter, matrix) = factor_with_jitter(matrix).map_err(|e| match e {
        LgpError::IllConditioned { max_jitter, .. } => {
            let (t_a, t_b) = closest_pair(times);
            LgpError::IllConditioned {
                max_jitter,
                t_a,
                t_b,
            }
        }
        other => other,
    })?;
    Ok(GramMatrix {
        points: times.to_vec(),
        matrix,
        jitter_applied: jitter,
        chol,
    })
}

fn closest_pair(times: &[f64]) -> (f64, f64) {
    let mut best = (f64::NAN, f64::NAN);
    let mut gap = f64::INFINITY;
    for i in 0..times.len() {
        for j in 0..i {
            let d = (times[i] - times[j]).abs();
            if d < gap {
                gap = d;
                best = (times[j], times[i]);
            }
        }
    }
    best
}

mod basis_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
    enum BasisConfig {
        Constant,
        Polynomial {
            degree: usize,
            #[serde(default, skip_serializing_if = "Option::is_none")]
            horizon: Option<f64>,
        },
        CubicSpline {
            knots: Vec<f64>,
            #[serde(default, skip_serializing_if = "Option::is_none")]
            horizon: Option<f64>,
        },
    }

    pub fn serialize<S: Serializer>(b: &BasisSet, s: S) -> std::result::Result<S::Ok, S::Error> {
        let horizon = b.horizon.is_finite().then_some(b.horizon);
        let c = match &b.kind {
            BasisKind::Constant => BasisConfig::Constant,
            BasisKind::Polynomial { degree } => BasisConfig::Polynomial {
                degree: *degree,
                horizon,
            },
            BasisKind::CubicSpline { knots } => BasisConfig::CubicSpline {
                knots: knots.clone(),
                horizon,
            },
        };
        c.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BasisSet, D::Error> {
        let c = BasisConfig::deserialize(d)?;
        let h = |h: Option<f64>| h.unwrap_or(f64::INFINITY);
        let b = match c {
            BasisConfig::Constant => Ok(BasisSet::constant()),
            BasisConfig::Polynomial { degree, horizon } => BasisSet::polynomial(degree, h(horizon)),
            BasisConfig::CubicSpline { knots, horizon } => BasisSet::cubic_spline(knots, h(horizon)),
        };
        b.map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn periodic() -> KernelSpec {
        KernelSpec::Periodic {
            c: 1.3,
            kappa: 0.8,
            p: 1.0,
        }
    }

    fn low_rank() -> KernelSpec {
        KernelSpec::BasisLowRank {
            weights: vec![0.7, -0.3, 0.05],
            basis: BasisSet::polynomial(2, 10.0).unwrap(),
        }
    }

    #[test]
    fn se_values() {
        let k = KernelSpec::se(1.0, 0.5);
        assert_eq!(kernel_eval(&k, 0.3, 0.3), 1.0);
        assert!((kernel_eval(&k, 0.0, 0.5) - (-0.5f64).exp()).abs() < 1e-15);
        let k = KernelSpec::se(0.7, 0.3);
        let v = kernel_eval(&k, 1.0, 1.6);
        assert!((v / 0.49 - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn single_point_gram() {
        let g = gram(&KernelSpec::se(2.0, 1.0), &[3.0]).unwrap();
        assert_eq!(g.matrix[(0, 0)], 4.0);
        assert_eq!(g.jitter_applied, 0.0);
    }

    #[test]
    fn far_points_decorrelate() {
        let g = gram(&KernelSpec::se(1.5, 0.2), &[0.0, 2.0]).unwrap();
        assert!(g.matrix[(0, 1)] < 1e-20);
        assert!((g.matrix[(0, 1)] - 2.25 * (-50.0f64).exp()).abs() < 1e-30);
    }

    #[test]
    fn low_rank_matches_outer_product_form() {
        let k = low_rank();
        let times = [0.5f64, 2.0, 3.3, 7.1];
        let phi = DMatrix::from_fn(4, 3, |i, h| times[i].powi(h as i32));
        let w2 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.49, 0.09, 0.0025]));
        let expected = &phi * w2 * phi.transpose();
        let got = raw_gram(&k, &times);
        assert!((got - expected).abs().max() < 1e-12);
    }

    #[test]
    fn ill_conditioned_names_points() {
        // rank-1 matrix that no jitter rung can rescue is impossible for a PSD
        // kernel; use a negative-weight "kernel" through a bad matrix instead
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            factor_with_jitter(bad),
            Err(LgpError::IllConditioned { .. })
        ));
    }

    #[test]
    fn dense_se_grid_needs_jitter() {
        let times: Vec<f64> = (0..60).map(|i| i as f64 * 0.01).collect();
        let g = gram(&KernelSpec::se(1.0, 1.0), &times).unwrap();
        assert!(g.jitter_applied > 0.0 && g.jitter_applied <= 1e-4);
        let diag = g.matrix[(5, 5)];
        assert!((diag - 1.0 - g.jitter_applied).abs() < 1e-15);
    }

    fn finite_difference(spec: &KernelSpec, t: f64, t2: f64) -> Vec<f64> {
        let v = spec.to_free();
        (0..v.len())
            .map(|k| {
                let h = 1e-6;
                let mut up = v.clone();
                up[k] += h;
                let mut dn = v.clone();
                dn[k] -= h;
                (spec.from_free(&up).eval(t, t2) - spec.from_free(&dn).eval(t, t2)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn se_gradient_matches_central_differences() {
        let k = KernelSpec::se(1.0, 0.3);
        let g = kernel_gradient(&k, 0.0, 0.1);
        let fd = finite_difference(&k, 0.0, 0.1);
        for (a, b) in g.iter().zip(&fd) {
            assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(kernel_gradient(&k, 0.4, 0.4)[1], 0.0);
    }

    #[test]
    fn other_gradients_match_central_differences() {
        for k in [
            KernelSpec::Exponential { c: 0.8, kappa: 0.6 },
            periodic(),
            low_rank(),
        ] {
            let g = kernel_gradient(&k, 0.37, 1.21);
            let fd = finite_difference(&k, 0.37, 1.21);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{k:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn periodic_lag_of_one_period() {
        let k = periodic();
        let v0 = kernel_eval(&k, 2.0, 2.0);
        let vp = kernel_eval(&k, 2.0, 3.0);
        assert!((v0 - vp).abs() < 1e-12);
        let g0 = kernel_gradient(&k, 2.0, 2.0);
        let gp = kernel_gradient(&k, 2.0, 3.0);
        for (a, b) in g0.iter().zip(&gp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn contraction_equals_explicit_sum() {
        let k = periodic();
        let times = [0.1, 0.4, 1.7];
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.3, 0.2, 2.0, 0.5, -0.3, 0.5, 0.7]);
        let got = k.contract_gradient(&times, &w);
        let mut want = vec![0.0; 3];
        for a in 0..3 {
            for b in 0..3 {
                let g = k.gradient(times[a], times[b]);
                for p in 0..3 {
                    want[p] += w[(a, b)] * g[p];
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_config_parses() {
        let k: KernelSpec = serde_json::from_str(r#"{"kind":"se","c":1.0,"kappa":0.3}"#).unwrap();
        assert_eq!(k, KernelSpec::se(1.0, 0.3));
        assert!(serde_json::from_str::<KernelSpec>(r#"{"kind":"matern","c":1.0}"#).is_err());
        assert!(
            serde_json::from_str::<KernelSpec>(r#"{"kind":"se","c":1.0,"kappa":0.3,"p":2}"#)
                .is_err()
        );
        let lr = low_rank();
        let s = serde_json::to_string(&lr).unwrap();
        assert_eq!(serde_json::from_str::<KernelSpec>(&s).unwrap(), lr);
    }

    fn arb_spec() -> impl Strategy<Value = KernelSpec> {
        prop_oneof![
            (0.1f64..3.0, 0.05f64..3.0).prop_map(|(c, kappa)| KernelSpec::se(c, kappa)),
            (0.1f64..3.0, 0.05f64..3.0)
                .prop_map(|(c, kappa)| KernelSpec::Exponential { c, kappa }),
            (0.1f64..3.0, 0.1f64..3.0, 0.2f64..5.0)
                .prop_map(|(c, kappa, p)| KernelSpec::Periodic { c, kappa, p }),
            proptest::collection::vec(-2.0f64..2.0, 1..4).prop_map(|w| {
                let d = w.len() - 1;
                let basis = if d == 0 {
                    BasisSet::constant()
                } else {
                    BasisSet::polynomial(d, 10.0).unwrap()
                };
                KernelSpec::BasisLowRank { weights: w, basis }
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symmetric(spec in arb_spec(), a in 0.0f64..10.0, b in 0.0f64..10.0) {
            prop_assert_eq!(spec.eval(a, b), spec.eval(b, a));
        }

        #[test]
        fn stationary_under_shift(spec in arb_spec(), a in 0.0f64..5.0, b in 0.0f64..5.0, d in 0.0f64..5.0) {
            prop_assume!(spec.is_stationary());
            let x = spec.eval(a + d, b + d);
            let y = spec.eval(a, b);
            prop_assert!((x - y).abs() < 1e-12 * (1.0 + y.abs()));
        }

        #[test]
        fn periodic_invariant_under_period_shift(c in 0.1f64..3.0, kappa in 0.1f64..3.0, p in 0.2f64..5.0,
                                                 a in 0.0f64..5.0, b in 0.0f64..5.0, n in 1u32..4) {
            let spec = KernelSpec::Periodic { c, kappa, p };
            let x = spec.eval(a, b + n as f64 * p);
            let y = spec.eval(a, b);
            prop_assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
        }

        #[test]
        fn gram_is_psd(spec in arb_spec(), times in proptest::collection::vec(0.0f64..10.0, 1..50)) {
            let m = raw_gram(&spec, &times);
            let eig = SymmetricEigen::new(m.clone());
            let scale = m.diagonal().max().max(1.0);
            prop_assert!(eig.eigenvalues.min() >= -1e-8 * scale);
        }
    }
}
