//! EM with a closed-form E-step for all-linear models, optionally
//! accelerated by SQUAREM with a monotone safeguard.

use rayon::prelude::*;

use super::mstep::{linear_item_update, prior_m_step, LatentMoments, LinearStats};
use super::{at_iteration, FitMethod, FitOptions, FitResult, TraceEntry};
use crate::data::{Dataset, ResponseValue};
use crate::error::{LgpError, Result};
use crate::measurement::Item;
use crate::model::{ModelSpec, ParamMap};
use crate::optim::{minimize, LbfgsbOptions, OptimResult};
use crate::gaussian::spd_inverse;
use crate::posterior::{latent_contract_gradient, linear_pseudo_obs, GpPosterior, LatentPrior};

pub(crate) struct EStep {
    pub loglik: f64,
    moments: Vec<LatentMoments>,
    stats: Vec<LinearStats>,
}

pub(crate) fn e_step(data: &Dataset, model: &ModelSpec, assign: &[usize]) -> Result<EStep> {
    let n_items = model.items().len();
    let per = data
        .individuals
        .par_iter()
        .zip(assign.par_iter())
        .map(|(s, &g)| {
            let obs = linear_pseudo_obs(s, model.items())?;
            let post = GpPosterior::new(LatentPrior::new(&s.times, &model.priors[g])?, &obs)?;
            let ll = post.loglik(&obs);
            let mean = post.mean();
            let cov = post.cov();
            let mut stats = vec![LinearStats::default(); n_items];
            for (k, row) in s.responses.iter().enumerate() {
                for (j, y) in row.iter().enumerate() {
                    if let ResponseValue::Continuous(y) = y {
                        stats[j].add(*y, mean[k], cov[(k, k)]);
                    }
                }
            }
            Ok((
                ll,
                LatentMoments {
                    times: s.times.clone(),
                    mean,
                    cov: Some(cov),
                },
                stats,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loglik = 0.0;
    let mut stats = vec![LinearStats::default(); n_items];
    let mut moments = Vec::with_capacity(per.len());
    for (ll, m, st) in per {
        loglik += ll;
        for (a, b) in stats.iter_mut().zip(&st) {
            a.merge(b);
        }
        moments.push(m);
    }
    if !loglik.is_finite() {
        return Err(LgpError::NonFinite { iteration: 0 });
    }
    Ok(EStep { loglik, moments, stats })
}

/// Exact marginal log-likelihood of an all-linear model at the free vector
/// `v`, with its gradient in free coordinates. Kernel and mean derivatives use
/// ∂ℓ/∂η = ½ βᵀ ∂K β − ½ tr(Σ⁻¹ ∂K) with Σ = K + W⁻¹ on the pseudo-observation
/// scale; item derivatives are those of the expected complete-data
/// log-likelihood at the same parameters, which coincide with the marginal
/// ones.
pub(crate) fn marginal_value_grad(
    data: &Dataset,
    map: &ParamMap,
    v: &[f64],
    assign: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let model = map.decode(v);
    let items = model.items();
    let n_groups = model.priors.len();
    struct Part {
        ll: f64,
        group: usize,
        g_alpha: Vec<f64>,
        g_kernel: Vec<f64>,
        stats: Vec<LinearStats>,
    }
    let parts = data
        .individuals
        .par_iter()
        .zip(assign.par_iter())
        .map(|(s, &g)| -> Result<Part> {
            let prior = &model.priors[g];
            let obs = linear_pseudo_obs(s, items)?;
            let post = GpPosterior::new(LatentPrior::new(&s.times, prior)?, &obs)?;
            let ll = post.loglik(&obs);
            let n = s.times.len();
            // Σ⁻¹ = W½ B⁻¹ W½
            let mut sinv = spd_inverse(&post.lb);
            for a in 0..n {
                for b in 0..n {
                    sinv[(a, b)] *= post.sw[a] * post.sw[b];
                }
            }
            let mut w = &post.beta * post.beta.transpose();
            w -= &sinv;
            let g_kernel = latent_contract_gradient(&prior.kernel, &s.times, &w).iter().map(|x| 0.5 * x).collect();
            let mut g_alpha = vec![0.0; prior.mean.n_coefficients()];
            for (k, &t) in s.times.iter().enumerate() {
                for (ga, x) in g_alpha.iter_mut().zip(prior.mean.design_row(t)?) {
                    *ga += x * post.beta[k];
                }
            }
            let mean = post.mean();
            let ks = &post.prior.k * &sinv;
            let mut stats = vec![LinearStats::default(); items.len()];
            for (k, row) in s.responses.iter().enumerate() {
                let var = post.prior.k[(k, k)] - ks.row(k).dot(&post.prior.k.column(k).transpose());
                for (j, y) in row.iter().enumerate() {
                    if let ResponseValue::Continuous(y) = y {
                        stats[j].add(*y, mean[k], var.max(0.0));
                    }
                }
            }
            Ok(Part {
                ll,
                group: g,
                g_alpha,
                g_kernel,
                stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ll = 0.0;
    let mut g_alpha: Vec<Vec<f64>> = model.priors.iter().map(|p| vec![0.0; p.mean.n_coefficients()]).collect();
    let mut g_kernel: Vec<Vec<f64>> = model.priors.iter().map(|p| vec![0.0; p.kernel.n_free()]).collect();
    let mut stats = vec![LinearStats::default(); items.len()];
    for p in &parts {
        ll += p.ll;
        for (a, b) in g_alpha[p.group].iter_mut().zip(&p.g_alpha) {
            *a += b;
        }
        for (a, b) in g_kernel[p.group].iter_mut().zip(&p.g_kernel) {
            *a += b;
        }
        for (a, b) in stats.iter_mut().zip(&p.stats) {
            a.merge(b);
        }
    }
    if !ll.is_finite() {
        return Err(LgpError::NonFinite { iteration: 0 });
    }
    let mut grad = vec![0.0; v.len()];
    for (g, (layout, off)) in map.priors.iter().zip(map.prior_offsets()).enumerate().take(n_groups) {
        let mut k = off;
        let skip = usize::from(layout.fix_intercept);
        for (ga, sc) in g_alpha[g].iter().zip(&layout.coefficient_scales).skip(skip) {
            grad[k] = ga / sc;
            k += 1;
        }
        for gk in g_kernel[g].iter().skip(usize::from(layout.fix_scale)) {
            grad[k] = *gk;
            k += 1;
        }
    }
    for ((item, layout), (off, st)) in items.iter().zip(&map.items).zip(map.item_offsets().into_iter().zip(&stats)) {
        let Item::Linear(it) = item else { continue };
        let x = &v[off..off + layout.n_free()];
        let s2 = it.sigma2;
        let ga = (st.sym - it.a * st.smm - it.b * st.sm) / s2;
        let gb = (st.sy - it.a * st.sm - it.b * st.n) / s2;
        let gs = -0.5 * st.n / s2 + 0.5 * st.sse(it.a, it.b) / (s2 * s2);
        grad[off..off + layout.n_free()].copy_from_slice(&layout.chain_gradient(item, x, ga, &[gb], gs));
    }
    Ok((ll, grad))
}

pub(crate) fn m_step(
    model: &ModelSpec,
    map: &ParamMap,
    e: &EStep,
    assign: &[usize],
    opts: &LbfgsbOptions,
) -> Result<ModelSpec> {
    let mut next = model.clone();
    for (g, (prior, layout)) in model.priors.iter().zip(&map.priors).enumerate() {
        let members: Vec<&LatentMoments> = e
            .moments
            .iter()
            .zip(assign)
            .filter(|(_, &a)| a == g)
            .map(|(m, _)| m)
            .collect();
        next.priors[g] = prior_m_step(prior, layout, &members, opts)?.0;
    }
    for ((item, layout), st) in next.measurement.items.iter_mut().zip(&map.items).zip(&e.stats) {
        if let Item::Linear(it) = item {
            if st.n > 0.0 {
                *it = linear_item_update(st, it, layout);
            }
        }
    }
    Ok(next)
}

/// Relative log-likelihood gain of one EM step below which EM hands over to
/// the quasi-Newton polish.
const POLISH_SWITCH: f64 = 1e-4;

/// Bounded quasi-Newton ascent on the exact marginal log-likelihood from the
/// EM iterate. Every improving evaluation is appended to the trace.
fn polish(
    data: &Dataset,
    map: &ParamMap,
    assign: &[usize],
    model: ModelSpec,
    loglik: f64,
    trace: &mut Vec<TraceEntry>,
) -> (ModelSpec, f64, OptimResult) {
    let n = data.n_observations().max(1) as f64;
    let (lo, hi) = map.bounds();
    let mut best = (model, loglik);
    let opts = LbfgsbOptions {
        max_iter: 500,
        pgtol: 1e-8,
        ftol: 1e-15,
        ..LbfgsbOptions::default()
    };
    let x0 = map.encode(&best.0);
    let res = minimize(
        |x| match marginal_value_grad(data, map, x, assign) {
            Ok((ll, g)) => {
                if ll > best.1 {
                    best = (map.decode(x), ll);
                    trace.push(TraceEntry {
                        iteration: trace.len(),
                        objective: ll,
                        params: best.0.report_vector(),
                    });
                }
                (-ll / n, g.iter().map(|v| -v / n).collect())
            }
            Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
        },
        &x0,
        &lo,
        &hi,
        &opts,
    );
    (best.0, best.1, res)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn fit_em_linear(data: &Dataset, model0: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if !model0.measurement.all_linear() {
        return Err(LgpError::Unsupported(
            "closed-form EM needs linear items only; use stochastic EM".into(),
        ));
    }
    let map = ParamMap::new(model0)?;
    let assign = model0.prior_assignment(data)?;
    let lopts = opts.mstep_options();
    let em_map = |model: &ModelSpec, e: &EStep| m_step(model, &map, e, &assign, &lopts);

    let mut model = model0.enforce_constraints();
    let mut e = e_step(data, &model, &assign)?;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        objective: e.loglik,
        params: model.report_vector(),
    }];
    let mut step_max = 1.0f64;
    let mut converged = None;

    let push = |trace: &mut Vec<TraceEntry>, m: &ModelSpec, ll: f64| {
        let iteration = trace.len();
        trace.push(TraceEntry {
            iteration,
            objective: ll,
            params: m.report_vector(),
        });
    };
    let check = |old_ll: f64, new_ll: f64, old: &ModelSpec, new: &ModelSpec| -> Option<String> {
        let gain = new_ll - old_ll;
        let dp = max_abs_diff(&old.report_vector(), &new.report_vector());
        if gain < opts.tol {
            Some(format!("log-likelihood gain {gain:.3e} below tolerance"))
        } else if dp < opts.tol {
            Some(format!("largest parameter change {dp:.3e} below tolerance"))
        } else {
            None
        }
    };

    while trace.len() <= opts.max_iter && converged.is_none() {
        let it = trace.len();
        let m1 = em_map(&model, &e).map_err(|err| at_iteration(err, it))?;
        let e1 = e_step(data, &m1, &assign).map_err(|err| at_iteration(err, it))?;
        push(&mut trace, &m1, e1.loglik);
        if let Some(r) = check(e.loglik, e1.loglik, &model, &m1) {
            converged = Some(r);
            (model, e) = (m1, e1);
            break;
        }
        if opts.polish && e1.loglik - e.loglik < POLISH_SWITCH * e1.loglik.abs().max(1.0) {
            (model, e) = (m1, e1);
            break;
        }
        if !opts.accelerate || trace.len() > opts.max_iter {
            (model, e) = (m1, e1);
            continue;
        }
        let m2 = em_map(&m1, &e1).map_err(|err| at_iteration(err, it + 1))?;
        let e2 = e_step(data, &m2, &assign).map_err(|err| at_iteration(err, it + 1))?;
        push(&mut trace, &m2, e2.loglik);
        if let Some(r) = check(e1.loglik, e2.loglik, &m1, &m2) {
            converged = Some(r);
            (model, e) = (m2, e2);
            break;
        }

        // SQUAREM extrapolation in free coordinates
        let (x0, x1, x2) = (map.encode(&model), map.encode(&m1), map.encode(&m2));
        let r: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = x2.iter().zip(&x1).zip(&r).map(|((a, b), c)| a - b - c).collect();
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (mut best_m, mut best_e) = (m2, e2);
        if vn > 0.0 && rn > 0.0 {
            let alpha = -(rn / vn).clamp(1.0, step_max);
            let (lo, hi) = map.bounds();
            let xp: Vec<f64> = (0..x0.len())
                .map(|k| (x0[k] - 2.0 * alpha * r[k] + alpha * alpha * v[k]).clamp(lo[k], hi[k]))
                .collect();
            let mp = map.decode(&xp);
            if let Ok(ep) = mp.validate().and_then(|_| e_step(data, &mp, &assign)) {
                if ep.loglik >= best_e.loglik {
                    if -alpha >= step_max {
                        step_max *= 4.0;
                    }
                    push(&mut trace, &mp, ep.loglik);
                    (best_m, best_e) = (mp, ep);
                } else {
                    step_max = (step_max / 4.0).max(1.0);
                }
            }
        }
        (model, e) = (best_m, best_e);
    }
    let mut loglik = e.loglik;
    let (converged, reason) = if opts.polish {
        let (m, ll, res) = polish(data, &map, &assign, model, loglik, &mut trace);
        (model, loglik) = (m, ll);
        if res.converged {
            (true, format!("quasi-Newton polish: {}", res.message))
        } else {
            (false, format!("quasi-Newton polish stopped: {}", res.message))
        }
    } else {
        match converged {
            Some(r) => (true, r),
            None => (false, format!("iteration budget of {} exhausted", opts.max_iter)),
        }
    };
    let iterations = trace.len() - 1;
    Ok(FitResult {
        method: FitMethod::Em,
        param_names: model.report_names(),
        fixed: model.fixed_mask(),
        loglik,
        psi_hat: model,
        trace,
        iterations,
        m0: None,
        m: None,
        converged,
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::MeanSpec;
    use crate::kernels::KernelSpec;
    use crate::measurement::LinearFactorItem;
    use crate::model::{ConstraintSet, LocationConstraint, ScaleConstraint};
    use crate::simulate::{simulate_dataset, SimConfig};

    fn two_item_model(kernel: KernelSpec, constraints: ConstraintSet) -> ModelSpec {
        ModelSpec::shared(
            MeanSpec::constant(1.2),
            kernel,
            vec![
                Item::Linear(LinearFactorItem { a: 1.0, b: 0.0, sigma2: 0.15 }),
                Item::Linear(LinearFactorItem { a: 0.7, b: 0.4, sigma2: 0.3 }),
            ],
            constraints,
        )
    }

    fn check_gradient(truth: ModelSpec, at: ModelSpec) {
        let data = simulate_dataset(&SimConfig::new(12, 3, 3, truth, 5)).unwrap().dataset;
        let map = ParamMap::new(&at).unwrap();
        let assign = at.prior_assignment(&data).unwrap();
        let v = map.encode(&at);
        let (f, g) = marginal_value_grad(&data, &map, &v, &assign).unwrap();
        assert!((f - crate::fit::marginal_loglik(&data, &at).unwrap()).abs() < 1e-9);
        let h = 1e-5;
        for k in 0..v.len() {
            let mut up = v.clone();
            let mut dn = v.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (marginal_value_grad(&data, &map, &up, &assign).unwrap().0
                - marginal_value_grad(&data, &map, &dn, &assign).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "coordinate {k}: analytic {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        let truth = two_item_model(KernelSpec::se(0.7, 0.3), ConstraintSet::default());
        let at = two_item_model(KernelSpec::se(0.9, 0.45), ConstraintSet::default());
        check_gradient(truth, at);
    }

    #[test]
    fn marginal_gradient_under_fixed_kernel_scale() {
        let constraints = ConstraintSet {
            scale: ScaleConstraint::FixKernelScale,
            location: LocationConstraint::FixFirstItemLocation,
        };
        let truth = two_item_model(KernelSpec::Exponential { c: 1.0, kappa: 0.5 }, constraints);
        let mut at = two_item_model(KernelSpec::Exponential { c: 1.0, kappa: 0.8 }, constraints);
        if let Item::Linear(it) = &mut at.measurement.items[0] {
            it.a = 0.8;
        }
        check_gradient(truth, at);
    }
}
