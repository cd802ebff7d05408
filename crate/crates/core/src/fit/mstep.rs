//! M-step pieces shared by EM and stochastic EM.
//!
//! The expected complete-data log-likelihood separates into one prior term
//! per group and one term per item. For a group with moments (m̂_i, C_i) of θ
//! at the observation times and residuals e_i = m̂_i − X_i α,
//!
//! Q = Σ_i [−½ ln|2πK_i| − ½ tr(K_i⁻¹ C_i) − ½ e_iᵀ K_i⁻¹ e_i].
//!
//! Given the kernel, α maximizes Q by generalized least squares, and for a
//! stationary kernel K = c²R the scale has the closed form
//! ĉ² = Σ_i [tr(R_i⁻¹C_i) + e_iᵀR_i⁻¹e_i] / Σ_i S_i. The remaining kernel
//! coordinates are found by bounded quasi-Newton on the profiled Q.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{Dataset, ResponseValue};
use crate::error::{LgpError, Result};
use crate::gaussian::{factor_with_jitter, spd_inverse};
use crate::kernels::KernelSpec;
use crate::measurement::{Item, LinearFactorItem, ProbitItem};
use crate::model::{GroupPrior, ItemLayout, ParamMap, PriorLayout};
use crate::normal;
use crate::optim::{minimize, LbfgsbOptions};
use crate::posterior::{latent_contract_gradient, latent_gram};

/// First two moments of θ_i at its observation times. `cov` is `None` when
/// θ_i is known (a stochastic-EM draw).
#[derive(Debug, Clone)]
pub struct LatentMoments {
    pub times: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
}

struct IndividualTerms {
    s: usize,
    ln_det: f64,
    kinv: DMatrix<f64>,
    kx: DMatrix<f64>,
    km: DVector<f64>,
    xkx: DMatrix<f64>,
    xkm: DVector<f64>,
    mkm: f64,
    tr_c: f64,
}

/// Value and gradients of one group's prior term.
#[derive(Debug, Clone)]
pub struct PriorTerm {
    pub q: f64,
    /// Mean coefficients used (GLS solution when profiled).
    pub alpha: Vec<f64>,
    /// Profiled c² when the scale was profiled.
    pub c2: Option<f64>,
    /// ∂Q/∂(kernel free coordinates), full layout. With a profiled scale this
    /// is the gradient of the profiled objective and the ln c entry is zero.
    pub grad_kernel: Vec<f64>,
    /// ∂Q/∂α.
    pub grad_alpha: Vec<f64>,
}

fn design(prior: &GroupPrior, times: &[f64]) -> Result<DMatrix<f64>> {
    let p = prior.mean.n_coefficients();
    let mut x = DMatrix::zeros(times.len(), p);
    for (s, &t) in times.iter().enumerate() {
        let row = prior.mean.design_row(t)?;
        for (k, v) in row.into_iter().enumerate() {
            x[(s, k)] = v;
        }
    }
    Ok(x)
}

fn individual_terms(kernel: &KernelSpec, x: &DMatrix<f64>, m: &LatentMoments) -> Result<IndividualTerms> {
    let (chol, _, _) = factor_with_jitter(latent_gram(kernel, &m.times))?;
    let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let kinv = spd_inverse(&chol);
    let kx = &kinv * x;
    let km = &kinv * &m.mean;
    let tr_c = match &m.cov {
        Some(c) => kinv.component_mul(c).sum(),
        None => 0.0,
    };
    Ok(IndividualTerms {
        s: m.times.len(),
        ln_det,
        xkx: x.transpose() * &kx,
        xkm: x.transpose() * &km,
        mkm: m.mean.dot(&km),
        kinv,
        kx,
        km,
        tr_c,
    })
}

/// How the mean coefficients and kernel scale enter [`prior_term`].
#[derive(Debug, Clone, Copy)]
pub struct PriorMode<'a> {
    /// Fixed mean coefficients, or `None` to profile them by GLS.
    pub alpha: Option<&'a [f64]>,
    /// Hold α₀ at zero while profiling.
    pub fix_intercept: bool,
    /// Profile the kernel scale (the kernel passed in must have c = 1).
    pub profile_scale: bool,
}

/// Expected complete-data log prior of one group at a given kernel.
pub fn prior_term(
    prior: &GroupPrior,
    kernel: &KernelSpec,
    moments: &[&LatentMoments],
    mode: PriorMode<'_>,
    want_grad: bool,
) -> Result<PriorTerm> {
    let p = prior.mean.n_coefficients();
    let terms = moments
        .par_iter()
        .map(|m| individual_terms(kernel, &design(prior, &m.times)?, m))
        .collect::<Result<Vec<_>>>()?;
    let mut xkx = DMatrix::zeros(p, p);
    let mut xkm = DVector::zeros(p);
    let mut n_obs = 0usize;
    for t in &terms {
        xkx += &t.xkx;
        xkm += &t.xkm;
        n_obs += t.s;
    }
    let alpha = match mode.alpha {
        Some(a) => DVector::from_column_slice(a),
        None => gls(&xkx, &xkm, mode.fix_intercept)?,
    };
    let t_sum: f64 = terms
        .iter()
        .map(|t| t.tr_c + t.mkm - 2.0 * alpha.dot(&t.xkm) + alpha.dot(&(&t.xkx * &alpha)))
        .sum();
    let ln_det_sum: f64 = terms.iter().map(|t| t.ln_det).sum();
    let n = n_obs as f64;
    let const_term = -n * normal::LN_SQRT_2PI;
    let (q, c2, inv_c2) = if mode.profile_scale {
        let c2 = t_sum / n;
        if !(c2 > 0.0 && c2.is_finite()) {
            return Err(LgpError::NonFinite { iteration: 0 });
        }
        (const_term - 0.5 * n * c2.ln() - 0.5 * ln_det_sum - 0.5 * n, Some(c2), 1.0 / c2)
    } else {
        (const_term - 0.5 * ln_det_sum - 0.5 * t_sum, None, 1.0)
    };
    let grad_alpha: Vec<f64> = terms
        .iter()
        .fold(DVector::zeros(p), |acc, t| acc + &t.xkm - &t.xkx * &alpha)
        .scale(inv_c2)
        .iter()
        .copied()
        .collect();
    let grad_kernel = if want_grad {
        let parts = moments
            .par_iter()
            .zip(terms.par_iter())
            .map(|(m, t)| {
                let u = &t.km - &t.kx * &alpha;
                let mut w = &u * u.transpose();
                if let Some(c) = &m.cov {
                    w += &t.kinv * c * &t.kinv;
                }
                w.scale_mut(inv_c2);
                w -= &t.kinv;
                latent_contract_gradient(kernel, &m.times, &w)
            })
            .collect::<Vec<_>>();
        let mut g = vec![0.0; kernel.n_free()];
        for part in parts {
            for (a, b) in g.iter_mut().zip(part) {
                *a += 0.5 * b;
            }
        }
        if mode.profile_scale {
            g[0] = 0.0;
        }
        g
    } else {
        vec![0.0; kernel.n_free()]
    };
    if !q.is_finite() {
        return Err(LgpError::NonFinite { iteration: 0 });
    }
    Ok(PriorTerm {
        q,
        alpha: alpha.iter().copied().collect(),
        c2,
        grad_kernel,
        grad_alpha,
    })
}

fn gls(xkx: &DMatrix<f64>, xkm: &DVector<f64>, fix_intercept: bool) -> Result<DVector<f64>> {
    let p = xkm.len();
    let first = usize::from(fix_intercept);
    let mut alpha = DVector::zeros(p);
    if first == p {
        return Ok(alpha);
    }
    let a = xkx.view((first, first), (p - first, p - first)).clone_owned();
    let b = xkm.rows(first, p - first).clone_owned();
    let sol = a
        .clone()
        .cholesky()
        .map(|c| c.solve(&b))
        .or_else(|| a.clone().lu().solve(&b))
        .ok_or_else(|| {
            LgpError::InvalidModel("mean coefficients are not identified by the data".into())
        })?;
    alpha.rows_mut(first, p - first).copy_from(&sol);
    Ok(alpha)
}

/// Maximize one group's prior term over its free parameters, starting from
/// `prior`. Returns the updated prior and its Q.
pub fn prior_m_step(
    prior: &GroupPrior,
    layout: &PriorLayout,
    moments: &[&LatentMoments],
    opts: &LbfgsbOptions,
) -> Result<(GroupPrior, f64)> {
    let profile = prior.kernel.is_stationary() && !layout.fix_scale;
    let mode = PriorMode {
        alpha: None,
        fix_intercept: layout.fix_intercept,
        profile_scale: profile,
    };
    let full0 = prior.kernel.to_free();
    let skip = usize::from(profile || layout.fix_scale);
    let kernel_at = |x: &[f64]| {
        let mut full = full0.clone();
        if profile {
            full[0] = 0.0;
        }
        full[skip..].copy_from_slice(x);
        prior.kernel.from_free(&full)
    };
    let n: f64 = moments.iter().map(|m| m.times.len() as f64).sum::<f64>().max(1.0);
    let x0 = full0[skip..].to_vec();
    let (lo_all, hi_all) = layout.kernel_bounds(&prior.kernel);
    let off = lo_all.len() - x0.len();
    let (lo, hi) = (lo_all[off..].to_vec(), hi_all[off..].to_vec());
    let (x, term) = if x0.is_empty() {
        let term = prior_term(prior, &kernel_at(&x0), moments, mode, false)?;
        (x0, term)
    } else {
        let mut evaluated: Vec<(Vec<f64>, f64, PriorTerm)> = Vec::new();
        let res = minimize(
            |x| match prior_term(prior, &kernel_at(x), moments, mode, true) {
                Ok(t) => {
                    let f = -t.q / n;
                    let g = t.grad_kernel[skip..].iter().map(|g| -g / n).collect();
                    evaluated.push((x.to_vec(), f, t));
                    (f, g)
                }
                Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
            },
            &x0,
            &lo,
            &hi,
            opts,
        );
        // the optimizer's final point, or the best value seen if it failed
        let pick = if res.converged {
            evaluated.iter().rposition(|(x, _, _)| *x == res.x)
        } else {
            None
        }
        .or_else(|| {
            (0..evaluated.len()).min_by(|&a, &b| evaluated[a].1.total_cmp(&evaluated[b].1))
        });
        match pick {
            Some(k) => {
                let (x, _, t) = evaluated.swap_remove(k);
                (x, t)
            }
            None => {
                return Err(LgpError::Optimizer {
                    iteration: 0,
                    message: format!("prior M-step: {}", res.message),
                })
            }
        }
    };
    let kernel = kernel_at(&x);
    let kernel = match term.c2 {
        Some(c2) => kernel.with_scale(c2.sqrt()),
        None => kernel,
    };
    let mut mean = prior.mean.clone();
    mean.coefficients = term.alpha.clone();
    Ok((
        GroupPrior {
            label: prior.label.clone(),
            mean,
            kernel,
        },
        term.q,
    ))
}

/// Sufficient statistics of one linear item: sums over its observed
/// responses of 1, y, y², E θ, E θ², y E θ.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinearStats {
    pub n: f64,
    pub sy: f64,
    pub syy: f64,
    pub sm: f64,
    pub smm: f64,
    pub sym: f64,
}

impl LinearStats {
    pub fn add(&mut self, y: f64, m: f64, v: f64) {
        self.n += 1.0;
        self.sy += y;
        self.syy += y * y;
        self.sm += m;
        self.smm += m * m + v;
        self.sym += y * m;
    }

    pub fn merge(&mut self, o: &LinearStats) {
        self.n += o.n;
        self.sy += o.sy;
        self.syy += o.syy;
        self.sm += o.sm;
        self.smm += o.smm;
        self.sym += o.sym;
    }

    /// Expected Σ (y − aθ − b)².
    pub fn sse(&self, a: f64, b: f64) -> f64 {
        self.syy - 2.0 * a * self.sym - 2.0 * b * self.sy
            + a * a * self.smm
            + 2.0 * a * b * self.sm
            + self.n * b * b
    }

    /// Expected log-likelihood of the item's responses.
    pub fn expected_loglik(&self, item: &LinearFactorItem) -> f64 {
        -self.n * (normal::LN_SQRT_2PI + 0.5 * item.sigma2.ln())
            - 0.5 * self.sse(item.a, item.b) / item.sigma2
    }
}

/// Lower limit on an estimated error variance.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Closed-form maximizer of the expected log-likelihood of a linear item.
pub fn linear_item_update(stats: &LinearStats, current: &LinearFactorItem, layout: &ItemLayout) -> LinearFactorItem {
    let (a, b) = match (layout.fix_loading, layout.fix_location) {
        (true, true) => (1.0, 0.0),
        (true, false) => (1.0, (stats.sy - stats.sm) / stats.n),
        (false, true) => (stats.sym / stats.smm, 0.0),
        (false, false) => {
            let det = stats.smm * stats.n - stats.sm * stats.sm;
            if det.abs() <= 1e-12 * stats.smm * stats.n {
                (current.a, current.b)
            } else {
                (
                    (stats.n * stats.sym - stats.sm * stats.sy) / det,
                    (stats.smm * stats.sy - stats.sm * stats.sym) / det,
                )
            }
        }
    };
    let sigma2 = (stats.sse(a, b) / stats.n).max(SIGMA2_FLOOR);
    LinearFactorItem { a, b, sigma2 }
}

/// Log-likelihood of ordinal responses and its gradient in (a, thresholds).
pub fn probit_loglik(item: &ProbitItem, obs: &[(f64, u32)]) -> (f64, f64, Vec<f64>) {
    let mut ll = 0.0;
    let mut ga = 0.0;
    let mut gb = vec![0.0; item.thresholds.len()];
    for &(theta, level) in obs {
        let (lo, hi) = item.bounds(level);
        let s = item.a * theta;
        let ln_p = normal::ln_cdf_diff(lo + s, hi + s);
        ll += ln_p;
        let ratio = |x: f64| if x.is_finite() { (normal::ln_pdf(x) - ln_p).exp() } else { 0.0 };
        let (rh, rl) = (ratio(hi + s), ratio(lo + s));
        ga += (rh - rl) * theta;
        let l = level as usize;
        if l < gb.len() {
            gb[l] += rh;
        }
        if l > 0 {
            gb[l - 1] -= rl;
        }
    }
    (ll, ga, gb)
}

/// Maximize a probit item's log-likelihood given θ values.
pub fn probit_item_update(
    item: &ProbitItem,
    layout: &ItemLayout,
    obs: &[(f64, u32)],
    opts: &LbfgsbOptions,
) -> Result<(ProbitItem, f64)> {
    let template = Item::Probit(item.clone());
    let x0 = layout.encode(&template);
    let (lo, hi) = layout.bounds();
    let n = (obs.len() as f64).max(1.0);
    let res = minimize(
        |x| {
            let Item::Probit(p) = layout.decode(&template, x) else { unreachable!() };
            let (ll, ga, gb) = probit_loglik(&p, obs);
            let g = layout.chain_gradient(&template, x, ga, &gb, 0.0);
            (-ll / n, g.iter().map(|v| -v / n).collect())
        },
        &x0,
        &lo,
        &hi,
        opts,
    );
    if !res.f.is_finite() {
        return Err(LgpError::Optimizer {
            iteration: 0,
            message: format!("probit item M-step: {}", res.message),
        });
    }
    let Item::Probit(p) = layout.decode(&template, &res.x) else { unreachable!() };
    Ok((p, -res.f * n))
}

/// Complete-data log-likelihood Σ_i [ln p(θ_i | Ψ) + ln p(y_i | θ_i, Ψ)] at
/// the free vector `v`, with its gradient in the free coordinates.
pub fn complete_data_objective(
    data: &Dataset,
    map: &ParamMap,
    v: &[f64],
    thetas: &[DVector<f64>],
) -> Result<(f64, Vec<f64>)> {
    let model = map.decode(v);
    let assign = model.prior_assignment(data)?;
    let mut grad = vec![0.0; v.len()];
    let mut total = 0.0;
    let moments: Vec<LatentMoments> = data
        .individuals
        .iter()
        .zip(thetas)
        .map(|(s, th)| LatentMoments {
            times: s.times.clone(),
            mean: th.clone(),
            cov: None,
        })
        .collect();
    for ((g, prior), (layout, off)) in model
        .priors
        .iter()
        .enumerate()
        .zip(map.priors.iter().zip(map.prior_offsets()))
    {
        let members: Vec<&LatentMoments> = moments
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == g)
            .map(|(m, _)| m)
            .collect();
        let mode = PriorMode {
            alpha: Some(&prior.mean.coefficients),
            fix_intercept: layout.fix_intercept,
            profile_scale: false,
        };
        let term = prior_term(prior, &prior.kernel, &members, mode, true)?;
        total += term.q;
        let skip = usize::from(layout.fix_intercept);
        let mut k = off;
        for (ga, sc) in term.grad_alpha.iter().zip(&layout.coefficient_scales).skip(skip) {
            grad[k] = ga / sc;
            k += 1;
        }
        for gk in term.grad_kernel.iter().skip(usize::from(layout.fix_scale)) {
            grad[k] = *gk;
            k += 1;
        }
    }
    for (j, ((item, layout), off)) in model
        .items()
        .iter()
        .zip(&map.items)
        .zip(map.item_offsets())
        .enumerate()
    {
        let x = &v[off..off + layout.n_free()];
        let g = match item {
            Item::Linear(it) => {
                let mut st = LinearStats::default();
                for (s, th) in data.individuals.iter().zip(thetas) {
                    for (row, t) in s.responses.iter().zip(th.iter()) {
                        if let ResponseValue::Continuous(y) = row[j] {
                            st.add(y, *t, 0.0);
                        }
                    }
                }
                total += st.expected_loglik(it);
                let s2 = it.sigma2;
                let ga = (st.sym - it.a * st.smm - it.b * st.sm) / s2;
                let gb = (st.sy - it.a * st.sm - it.b * st.n) / s2;
                let gs = -0.5 * st.n / s2 + 0.5 * st.sse(it.a, it.b) / (s2 * s2);
                layout.chain_gradient(item, x, ga, &[gb], gs)
            }
            Item::Probit(p) => {
                let obs = probit_observations(data, thetas, j);
                let (ll, ga, gb) = probit_loglik(p, &obs);
                total += ll;
                layout.chain_gradient(item, x, ga, &gb, 0.0)
            }
        };
        grad[off..off + g.len()].copy_from_slice(&g);
    }
    Ok((total, grad))
}

/// (θ, level) pairs of item j's observed ordinal responses.
pub fn probit_observations(data: &Dataset, thetas: &[DVector<f64>], j: usize) -> Vec<(f64, u32)> {
    let mut obs = Vec::new();
    for (s, th) in data.individuals.iter().zip(thetas) {
        for (row, t) in s.responses.iter().zip(th.iter()) {
            if let ResponseValue::Ordinal(l) = row[j] {
                obs.push((*t, l));
            }
        }
    }
    obs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::MeanSpec;
    use crate::model::{ConstraintSet, ModelSpec};
    use crate::simulate::{simulate_dataset, SimConfig};

    #[test]
    fn complete_data_gradient_matches_finite_differences() {
        let model = ModelSpec::shared(
            MeanSpec::constant(-0.3),
            KernelSpec::se(0.9, 0.35),
            vec![
                Item::Probit(ProbitItem { a: 1.0, thresholds: vec![-0.4, 0.9] }),
                Item::Linear(LinearFactorItem { a: 0.8, b: 0.2, sigma2: 0.25 }),
                Item::Probit(ProbitItem { a: 0.6, thresholds: vec![0.1] }),
            ],
            ConstraintSet::default(),
        );
        let sim = simulate_dataset(&SimConfig::new(10, 3, 3, model.clone(), 9)).unwrap();
        let thetas: Vec<DVector<f64>> = sim.truth.iter().map(|t| DVector::from_vec(t.theta_obs.clone())).collect();
        let mut at = model.clone();
        at.priors[0].kernel = KernelSpec::se(1.1, 0.5);
        at.priors[0].mean = MeanSpec::constant(0.1);
        let map = ParamMap::new(&at).unwrap();
        let v = map.encode(&at);
        let (_, g) = complete_data_objective(&sim.dataset, &map, &v, &thetas).unwrap();
        let h = 1e-5;
        for k in 0..v.len() {
            let mut up = v.clone();
            let mut dn = v.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (complete_data_objective(&sim.dataset, &map, &up, &thetas).unwrap().0
                - complete_data_objective(&sim.dataset, &map, &dn, &thetas).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "coordinate {k}: analytic {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn probit_loglik_gradient_matches_finite_differences() {
        let item = ProbitItem { a: 0.7, thresholds: vec![-0.5, 0.3, 1.2] };
        let obs = [(0.4, 0), (-1.0, 1), (0.2, 2), (1.5, 3), (-0.3, 0), (0.0, 2)];
        let (f, ga, gb) = probit_loglik(&item, &obs);
        let value = |a: f64, b: &[f64]| probit_loglik(&ProbitItem { a, thresholds: b.to_vec() }, &obs).0;
        let h = 1e-6;
        let fd_a = (value(item.a + h, &item.thresholds) - value(item.a - h, &item.thresholds)) / (2.0 * h);
        assert!((fd_a - ga).abs() < 1e-6, "{fd_a} vs {ga}");
        for l in 0..3 {
            let mut up = item.thresholds.clone();
            let mut dn = item.thresholds.clone();
            up[l] += h;
            dn[l] -= h;
            let fd = (value(item.a, &up) - value(item.a, &dn)) / (2.0 * h);
            assert!((fd - gb[l]).abs() < 1e-6, "threshold {l}: {fd} vs {}", gb[l]);
        }
        assert!(f < 0.0);
    }
}
