//! Stochastic EM: a Gibbs draw of θ replaces the E-step expectation, and the
//! estimate averages the last `m` of `m0 + m` iterates.

use nalgebra::DVector;
use rayon::prelude::*;

use super::mstep::{
    complete_data_objective,    linear_item_update, prior_m_step, probit_item_update, probit_observations, LatentMoments,
    LinearStats,
};
use super::{at_iteration, FitMethod, FitOptions, FitResult, TraceEntry};
use crate::data::{Dataset, ResponseValue};
use crate::error::{LgpError, Result};
use crate::measurement::Item;
use crate::model::{ModelSpec, ParamMap};
use crate::posterior::{GibbsSampler, GibbsState};
use crate::rng::{stream, Stage};

/// Complete-data M-step given θ draws. Returns the new model and the
/// complete-data log-likelihood it attains.
pub(crate) fn stem_m_step(
    data: &Dataset,
    model: &ModelSpec,
    map: &ParamMap,
    thetas: &[DVector<f64>],
    assign: &[usize],
    opts: &FitOptions,
) -> Result<(ModelSpec, f64)> {
    let lopts = opts.mstep_options();
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
    let mut next = model.clone();
    let mut objective = 0.0;
    for (g, (prior, layout)) in model.priors.iter().zip(&map.priors).enumerate() {
        let members: Vec<&LatentMoments> = moments
            .iter()
            .zip(assign)
            .filter(|(_, &a)| a == g)
            .map(|(m, _)| m)
            .collect();
        let (p, q) = prior_m_step(prior, layout, &members, &lopts)?;
        next.priors[g] = p;
        objective += q;
    }
    let updates = next
        .measurement
        .items
        .par_iter()
        .zip(map.items.par_iter())
        .enumerate()
        .map(|(j, (item, layout))| -> Result<(Item, f64)> {
            match item {
                Item::Linear(it) => {
                    let mut st = LinearStats::default();
                    for (s, th) in data.individuals.iter().zip(thetas) {
                        for (row, t) in s.responses.iter().zip(th.iter()) {
                            if let ResponseValue::Continuous(y) = row[j] {
                                st.add(y, *t, 0.0);
                            }
                        }
                    }
                    if st.n == 0.0 {
                        return Ok((item.clone(), 0.0));
                    }
                    let new = linear_item_update(&st, it, layout);
                    let ll = st.expected_loglik(&new);
                    Ok((Item::Linear(new), ll))
                }
                Item::Probit(p) => {
                    let obs = probit_observations(data, thetas, j);
                    if obs.is_empty() {
                        return Ok((item.clone(), 0.0));
                    }
                    let (new, ll) = probit_item_update(p, layout, &obs, &lopts)?;
                    Ok((Item::Probit(new), ll))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for (slot, (item, ll)) in next.measurement.items.iter_mut().zip(updates) {
        *slot = item;
        objective += ll;
    }
    Ok((next, objective))
}

pub fn fit_stem(data: &Dataset, model0: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if opts.m == 0 {
        return Err(LgpError::InvalidModel("stochastic EM needs m ≥ 1".into()));
    }
    let map = ParamMap::new(model0)?;
    let assign = model0.prior_assignment(data)?;
    let mut model = model0.enforce_constraints();
    let mut states: Vec<GibbsState> = data
        .individuals
        .par_iter()
        .map(|s| Ok(GibbsSampler::new(s, &model)?.initial_state()))
        .collect::<Result<Vec<_>>>()?;
    let thetas0: Vec<DVector<f64>> = states.iter().map(|s| s.theta.clone()).collect();
    let objective0 = complete_data_objective(data, &map, &map.encode(&model), &thetas0)?.0;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        objective: objective0,
        params: model.report_vector(),
    }];
    let total = opts.m0 + opts.m;
    for l in 1..=total {
        states = data
            .individuals
            .par_iter()
            .zip(states.into_par_iter())
            .enumerate()
            .map(|(i, (s, mut st))| {
                let sampler = GibbsSampler::new(s, &model)?;
                let mut rng = stream(opts.seed, Stage::Gibbs, i as u64, l as u64);
                for _ in 0..opts.gibbs_sweeps.max(1) {
                    sampler.sweep(&mut st, &mut rng)?;
                }
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| at_iteration(e, l))?;
        let thetas: Vec<DVector<f64>> = states.iter().map(|s| s.theta.clone()).collect();
        let (next, objective) =
            stem_m_step(data, &model, &map, &thetas, &assign, opts).map_err(|e| at_iteration(e, l))?;
        if !objective.is_finite() {
            return Err(LgpError::NonFinite { iteration: l });
        }
        model = next;
        trace.push(TraceEntry {
            iteration: l,
            objective,
            params: model.report_vector(),
        });
        log::debug!("stochastic EM iteration {l}/{total}: objective {objective:.4}");
    }
    let tail = &trace[trace.len() - opts.m..];
    let p = tail[0].params.len();
    let avg: Vec<f64> = (0..p)
        .map(|k| tail.iter().map(|t| t.params[k]).sum::<f64>() / opts.m as f64)
        .collect();
    let psi_hat = model.from_report(&avg)?.enforce_constraints();
    psi_hat.validate()?;
    Ok(FitResult {
        method: FitMethod::Stem,
        param_names: psi_hat.report_names(),
        fixed: psi_hat.fixed_mask(),
        loglik: trace.last().map_or(f64::NAN, |t| t.objective),
        psi_hat,
        iterations: total,
        trace,
        m0: Some(opts.m0),
        m: Some(opts.m),
        converged: true,
        reason: format!("iteration budget m0 + m = {total} completed"),
    })
}
