//! Individual-level inference on θ_i(t).
//!
//! Linear items enter through per-time pseudo-observations: at time s the
//! observed items contribute precision w_s = Σ a_j²/σ_j² and score
//! r_s = Σ a_j (y_sj − b_j)/σ_j². With W = diag(w) and
//! B = I + W^{1/2} K W^{1/2}, every quantity below (likelihood, posterior
//! mean and covariance, predictions) is computed from the Cholesky factor of
//! B, which stays well conditioned even when K is numerically singular.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{IndividualSeries, ResponseValue};
use crate::error::{LgpError, Result};
use crate::gaussian::{conditional_grid, factor_with_jitter, lower_times, standard_normal_vec, truncnorm_sample};
use crate::kernels::{cross_cov, raw_gram, KernelSpec};
use crate::measurement::Item;
use crate::model::{GroupPrior, ModelSpec};
use crate::normal;

/// White-noise share of the latent prior variance: θ carries an independent
/// N(0, 1e-8·K(t,t)) component at each observation time. It keeps the prior
/// covariance positive definite for dense designs under smooth kernels, where
/// K alone is singular to working precision.
pub const LATENT_NUGGET: f64 = 1e-8;

/// K at `times` plus the latent nugget on the diagonal.
pub fn latent_gram(kernel: &KernelSpec, times: &[f64]) -> DMatrix<f64> {
    let mut k = raw_gram(kernel, times);
    let scale = k.diagonal().iter().fold(0.0f64, |a, &b| a.max(b));
    for i in 0..times.len() {
        k[(i, i)] += LATENT_NUGGET * scale;
    }
    k
}

/// Σ_{a,b} W_ab ∂(latent_gram)_ab/∂η for every free kernel parameter η. The
/// nugget follows the largest prior variance, so its derivative is that of
/// the top diagonal entry.
pub fn latent_contract_gradient(kernel: &KernelSpec, times: &[f64], w: &DMatrix<f64>) -> Vec<f64> {
    let mut g = kernel.contract_gradient(times, w);
    let top = times
        .iter()
        .map(|&t| kernel.eval(t, t))
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((a, _)) = top {
        let tr = w.trace();
        for (gk, dk) in g.iter_mut().zip(kernel.gradient(times[a], times[a])) {
            *gk += LATENT_NUGGET * tr * dk;
        }
    }
    g
}

/// Prior law of θ at one individual's observation times.
#[derive(Debug, Clone)]
pub struct LatentPrior {
    pub times: Vec<f64>,
    pub mu: DVector<f64>,
    pub k: DMatrix<f64>,
}

impl LatentPrior {
    pub fn new(times: &[f64], prior: &GroupPrior) -> Result<Self> {
        let mu = times
            .iter()
            .map(|&t| prior.mean.eval(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentPrior {
            times: times.to_vec(),
            mu: DVector::from_vec(mu),
            k: latent_gram(&prior.kernel, times),
        })
    }
}

/// Linear-item data collapsed onto the time points.
#[derive(Debug, Clone)]
pub struct PseudoObs {
    pub w: DVector<f64>,
    pub r: DVector<f64>,
    /// Σ over observed linear responses of ln N(y − b; 0, σ²).
    pub const_term: f64,
}

pub fn linear_pseudo_obs(series: &IndividualSeries, items: &[Item]) -> Result<PseudoObs> {
    let s_len = series.len();
    let mut w = DVector::zeros(s_len);
    let mut r = DVector::zeros(s_len);
    let mut c = 0.0;
    for (s, row) in series.responses.iter().enumerate() {
        for (j, (item, y)) in items.iter().zip(row).enumerate() {
            match (item, y) {
                (_, ResponseValue::Missing) | (Item::Probit(_), ResponseValue::Ordinal(_)) => {}
                (Item::Linear(it), ResponseValue::Continuous(y)) => {
                    let u = y - it.b;
                    w[s] += it.a * it.a / it.sigma2;
                    r[s] += it.a * u / it.sigma2;
                    c += -0.5 * (2.0 * std::f64::consts::PI * it.sigma2).ln() - 0.5 * u * u / it.sigma2;
                }
                _ => {
                    return Err(LgpError::ResponseMismatch {
                        item: j,
                        message: format!("individual {} at time {}", series.id, series.times[s]),
                    })
                }
            }
        }
    }
    Ok(PseudoObs { w, r, const_term: c })
}

/// Gaussian posterior of θ at the observation times under pseudo-observations.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub prior: LatentPrior,
    pub sw: DVector<f64>,
    pub lb: Cholesky<f64, Dyn>,
    /// W^{1/2} B⁻¹ v for the pseudo-observations the posterior was built with.
    pub beta: DVector<f64>,
    quad: f64,
}

impl GpPosterior {
    pub fn new(prior: LatentPrior, obs: &PseudoObs) -> Result<Self> {
        let n = prior.times.len();
        let sw = obs.w.map(|w| w.max(0.0).sqrt());
        let mut b = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] += sw[i] * prior.k[(i, j)] * sw[j];
            }
        }
        let (lb, _, _) = factor_with_jitter(b)?;
        let mut post = GpPosterior {
            prior,
            sw,
            lb,
            beta: DVector::zeros(n),
            quad: 0.0,
        };
        let v = post.v_of(&obs.r);
        let z = post.lb.l_dirty().solve_lower_triangular(&v).expect("nonsingular factor");
        post.quad = z.norm_squared();
        post.beta = post.lb.solve(&v).component_mul(&post.sw);
        Ok(post)
    }

    fn v_of(&self, r: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(r.len(), |s, _| {
            if self.sw[s] > 0.0 {
                r[s] / self.sw[s] - self.sw[s] * self.prior.mu[s]
            } else {
                0.0
            }
        })
    }

    pub fn half_ln_det_b(&self) -> f64 {
        self.lb.l_dirty().diagonal().iter().map(|d| d.ln()).sum()
    }

    /// Marginal log-likelihood of the linear responses that built `obs`.
    pub fn loglik(&self, obs: &PseudoObs) -> f64 {
        let fit: f64 = obs
            .w
            .iter()
            .zip(obs.r.iter())
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, r)| 0.5 * r * r / w)
            .sum();
        obs.const_term + fit - self.half_ln_det_b() - 0.5 * self.quad
    }

    /// Posterior mean at the observation times.
    pub fn mean(&self) -> DVector<f64> {
        &self.prior.mu + &self.prior.k * &self.beta
    }

    /// Posterior mean for another score vector r with the same precisions.
    pub fn mean_for(&self, r: &DVector<f64>) -> DVector<f64> {
        let beta = self.lb.solve(&self.v_of(r)).component_mul(&self.sw);
        &self.prior.mu + &self.prior.k * beta
    }

    /// Posterior covariance K − VᵀV with V = L_B⁻¹ W^{1/2} K.
    pub fn cov(&self) -> DMatrix<f64> {
        let n = self.sw.len();
        let mut v = self.prior.k.clone();
        for i in 0..n {
            v.row_mut(i).scale_mut(self.sw[i]);
        }
        self.lb.l_dirty().solve_lower_triangular_mut(&mut v);
        let mut c = self.prior.k.clone();
        c.gemm_tr(-1.0, &v, &v, 1.0);
        c
    }

    /// Posterior mean and variance of θ on `grid`.
    pub fn predict(&self, grid: &[f64], prior: &GroupPrior) -> Result<(Vec<f64>, Vec<f64>)> {
        let kst = cross_cov(&prior.kernel, &self.prior.times, grid);
        let mut mean = Vec::with_capacity(grid.len());
        let mut var = Vec::with_capacity(grid.len());
        let mut u = kst.clone();
        for i in 0..u.nrows() {
            u.row_mut(i).scale_mut(self.sw[i]);
        }
        self.lb.l_dirty().solve_lower_triangular_mut(&mut u);
        for (g, &t) in grid.iter().enumerate() {
            let m = prior.mean.eval(t)? + kst.column(g).dot(&self.beta);
            let kss = prior.kernel.eval(t, t);
            let v = kss - u.column(g).norm_squared();
            if v < -1e-8 * kss.max(1e-300) {
                return Err(LgpError::NegativeVariance(v));
            }
            mean.push(m);
            var.push(v.max(0.0));
        }
        Ok((mean, var))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    pub alpha: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCurve {
    pub grid: Vec<f64>,
    /// EAP curve.
    pub mean: Vec<f64>,
    /// Sorted by α.
    pub quantiles: Vec<QuantileCurve>,
    /// Monte Carlo draws used; 0 on the analytic path.
    pub n_samples: usize,
    /// Naive Monte Carlo standard error of `mean` (Monte Carlo path only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_se: Option<Vec<f64>>,
}

impl PosteriorCurve {
    pub fn quantile(&self, alpha: f64) -> Option<&[f64]> {
        self.quantiles
            .iter()
            .find(|q| q.alpha == alpha)
            .map(|q| q.values.as_slice())
    }
}

fn bands(mean: &[f64], sd: &[f64], alphas: &[f64]) -> Result<Vec<QuantileCurve>> {
    let mut a: Vec<f64> = alphas.to_vec();
    if a.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(LgpError::InvalidModel(format!("quantile levels must lie in (0,1): {alphas:?}")));
    }
    a.sort_by(f64::total_cmp);
    a.dedup();
    Ok(a.into_iter()
        .map(|alpha| {
            let z = if alpha == 0.5 { 0.0 } else { normal::quantile(alpha) };
            QuantileCurve {
                alpha,
                values: mean.iter().zip(sd).map(|(m, s)| m + z * s).collect(),
            }
        })
        .collect())
}

/// Evenly spaced grid of `n` points on [0, horizon].
pub fn default_grid(horizon: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|k| horizon * k as f64 / (n - 1) as f64).collect(),
    }
}

pub const DEFAULT_GRID_POINTS: usize = 200;
pub const DEFAULT_SAMPLES: usize = 100;
pub const DEFAULT_BURN_IN: usize = 100;

/// Exact posterior mean and quantile curves for an all-linear model.
pub fn posterior_analytic(
    series: &IndividualSeries,
    model: &ModelSpec,
    grid: &[f64],
    alphas: &[f64],
) -> Result<PosteriorCurve> {
    if !model.measurement.all_linear() {
        return Err(LgpError::Unsupported(
            "analytic posterior needs linear items only; use the Monte Carlo path".into(),
        ));
    }
    let prior = model.prior_for(series)?;
    let obs = linear_pseudo_obs(series, model.items())?;
    let post = GpPosterior::new(LatentPrior::new(&series.times, prior)?, &obs)?;
    let (mean, var) = post.predict(grid, prior)?;
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    Ok(PosteriorCurve {
        grid: grid.to_vec(),
        quantiles: bands(&mean, &sd, alphas)?,
        mean,
        n_samples: 0,
        mc_se: None,
    })
}

/// Current values of a Gibbs chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    /// θ at the observation times.
    pub theta: DVector<f64>,
    /// Latent responses, S × J; NaN where the item is not an observed probit response.
    pub latent_y: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct ProbitCell {
    s: usize,
    j: usize,
    a: f64,
    lo: f64,
    hi: f64,
}

/// Everything a Gibbs chain needs that depends only on (individual, Ψ).
#[derive(Debug, Clone)]
pub struct GibbsSampler {
    post: GpPosterior,
    r_linear: DVector<f64>,
    chol_cov: DMatrix<f64>,
    cells: Vec<ProbitCell>,
    n_items: usize,
}

impl GibbsSampler {
    pub fn new(series: &IndividualSeries, model: &ModelSpec) -> Result<Self> {
        let prior = model.prior_for(series)?;
        let mut obs = linear_pseudo_obs(series, model.items())?;
        let mut cells = Vec::new();
        for (s, row) in series.responses.iter().enumerate() {
            for (j, (item, y)) in model.items().iter().zip(row).enumerate() {
                if let (Item::Probit(p), ResponseValue::Ordinal(l)) = (item, y) {
                    if *l > p.max_level() {
                        return Err(LgpError::LevelOutOfRange {
                            item: j,
                            level: *l,
                            max: p.max_level(),
                        });
                    }
                    let (lo, hi) = p.bounds(*l);
                    obs.w[s] += p.a * p.a;
                    cells.push(ProbitCell { s, j, a: p.a, lo, hi });
                }
            }
        }
        let r_linear = obs.r.clone();
        let post = GpPosterior::new(LatentPrior::new(&series.times, prior)?, &obs)?;
        let (chol, _, _) = factor_with_jitter(post.cov())?;
        Ok(GibbsSampler {
            post,
            r_linear,
            chol_cov: chol.l(),
            cells,
            n_items: model.items().len(),
        })
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.post.prior.mu
    }

    /// θ at the prior mean; latent responses at their truncated-normal means.
    pub fn initial_state(&self) -> GibbsState {
        let theta = self.post.prior.mu.clone();
        let mut latent_y = vec![vec![f64::NAN; self.n_items]; theta.len()];
        for c in &self.cells {
            latent_y[c.s][c.j] = truncated_mean(-c.a * theta[c.s], c.lo, c.hi);
        }
        GibbsState { theta, latent_y }
    }

    /// Step 1: latent responses given θ.
    pub fn sample_latent<R: Rng + ?Sized>(&self, state: &mut GibbsState, rng: &mut R) -> Result<()> {
        for c in &self.cells {
            state.latent_y[c.s][c.j] = truncnorm_sample(-c.a * state.theta[c.s], c.lo, c.hi, rng)?;
        }
        Ok(())
    }

    /// Step 2: θ jointly given the latent responses.
    pub fn sample_theta<R: Rng + ?Sized>(&self, state: &mut GibbsState, rng: &mut R) {
        let mut r = self.r_linear.clone();
        for c in &self.cells {
            r[c.s] -= c.a * state.latent_y[c.s][c.j];
        }
        let m = self.post.mean_for(&r);
        let z = standard_normal_vec(m.len(), rng);
        state.theta = m + lower_times(&self.chol_cov, &z);
    }

    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut GibbsState, rng: &mut R) -> Result<()> {
        self.sample_latent(state, rng)?;
        self.sample_theta(state, rng);
        Ok(())
    }
}

fn truncated_mean(c: f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo - c, hi - c);
    let ln_z = normal::ln_cdf_diff(a, b);
    let term = |x: f64| {
        if x.is_infinite() {
            0.0
        } else {
            (normal::ln_pdf(x) - ln_z).exp()
        }
    };
    let m = c + term(a) - term(b);
    m.clamp(lo, hi)
}

/// One two-step Gibbs sweep.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &GibbsState,
    series: &IndividualSeries,
    model: &ModelSpec,
    rng: &mut R,
) -> Result<GibbsState> {
    let sampler = GibbsSampler::new(series, model)?;
    let mut next = state.clone();
    sampler.sweep(&mut next, rng)?;
    Ok(next)
}

/// Monte Carlo posterior curve: EAP = mean of μ(θ^{(l)}); quantile α =
/// mean of μ(θ^{(l)}) + z_α σ, the plug-in mixture of conditional quantiles.
#[allow(clippy::too_many_arguments)]
pub fn posterior_mc<R: Rng + ?Sized>(
    series: &IndividualSeries,
    model: &ModelSpec,
    grid: &[f64],
    alphas: &[f64],
    n_samples: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<PosteriorCurve> {
    if n_samples == 0 {
        return Err(LgpError::InvalidModel("Monte Carlo path needs at least one sample".into()));
    }
    let prior = model.prior_for(series)?;
    let sampler = GibbsSampler::new(series, model)?;
    let cond = conditional_grid(grid, &series.times, &prior.mean, &prior.kernel)?;
    let mut state = sampler.initial_state();
    for _ in 0..burn_in {
        sampler.sweep(&mut state, rng)?;
    }
    let g = grid.len();
    let mut sum = DVector::zeros(g);
    let mut sum_sq = DVector::zeros(g);
    for _ in 0..n_samples {
        sampler.sweep(&mut state, rng)?;
        let mu = cond.mu(&state.theta);
        sum_sq += mu.component_mul(&mu);
        sum += mu;
    }
    let l = n_samples as f64;
    let mean: Vec<f64> = (sum / l).iter().copied().collect();
    let mc_se: Vec<f64> = (0..g)
        .map(|k| {
            let v = (sum_sq[k] / l - mean[k] * mean[k]).max(0.0);
            (v * l / (l - 1.0).max(1.0) / l).sqrt()
        })
        .collect();
    let sd: Vec<f64> = cond.sigma2.iter().map(|v| v.sqrt()).collect();
    Ok(PosteriorCurve {
        grid: grid.to_vec(),
        quantiles: bands(&mean, &sd, alphas)?,
        mean,
        n_samples,
        mc_se: Some(mc_se),
    })
}
