//! Population-level maximum-likelihood estimation.

mod bootstrap;
mod em;
pub mod mstep;
pub mod start;
mod stem;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bootstrap::{
    bootstrap, bootstrap_from_indices, resolve_contrast, BootstrapOptions, BootstrapResult, Fitter,
    Interval,
};
pub use em::fit_em_linear;
pub use stem::fit_stem;

use crate::data::Dataset;
use crate::error::{LgpError, Result};
use crate::model::ModelSpec;
use crate::optim::LbfgsbOptions;
use crate::posterior::{linear_pseudo_obs, GpPosterior, LatentPrior};
use crate::rng::DEFAULT_SEED;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// EM: largest number of EM map applications.
    pub max_iter: usize,
    /// EM: stop once the log-likelihood gain or the largest parameter change
    /// falls below this.
    pub tol: f64,
    /// EM: SQUAREM extrapolation between plain EM steps.
    pub accelerate: bool,
    /// EM: finish with quasi-Newton ascent on the exact marginal likelihood
    /// once EM progress has slowed.
    pub polish: bool,
    /// Stochastic EM burn-in iterations.
    pub m0: usize,
    /// Stochastic EM iterations averaged into the estimate.
    pub m: usize,
    pub gibbs_sweeps: usize,
    pub seed: u64,
    /// Perturb the moment-based start at random (stream `Init`).
    pub random_init: bool,
    /// Use stochastic EM even when every item is linear.
    pub force_stem: bool,
    /// Iteration cap of each quasi-Newton M-step.
    pub mstep_max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 2000,
            tol: 1e-8,
            accelerate: true,
            polish: true,
            m0: 100,
            m: 200,
            gibbs_sweeps: 5,
            seed: DEFAULT_SEED,
            random_init: false,
            force_stem: false,
            mstep_max_iter: 100,
        }
    }
}

impl FitOptions {
    pub(crate) fn mstep_options(&self) -> LbfgsbOptions {
        LbfgsbOptions {
            max_iter: self.mstep_max_iter,
            pgtol: 1e-8,
            ftol: 1e-12,
            noise: 1e-6,
            ..LbfgsbOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Em,
    Stem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Marginal log-likelihood (EM) or complete-data log-likelihood after the
    /// M-step (stochastic EM).
    pub objective: f64,
    /// Parameters in [`ModelSpec::report_vector`] order.
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: FitMethod,
    pub psi_hat: ModelSpec,
    pub param_names: Vec<String>,
    /// Entries pinned by the identifiability constraints.
    pub fixed: Vec<bool>,
    /// Marginal log-likelihood at `psi_hat` (EM) or the final complete-data
    /// objective (stochastic EM).
    pub loglik: f64,
    pub trace: Vec<TraceEntry>,
    pub iterations: usize,
    pub m0: Option<usize>,
    pub m: Option<usize>,
    pub converged: bool,
    pub reason: String,
}

impl FitResult {
    pub fn estimates(&self) -> Vec<f64> {
        self.psi_hat.report_vector()
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        let k = self.param_names.iter().position(|n| n == name)?;
        Some(self.estimates()[k])
    }

    /// Mean-split drift of the averaged tail of a stochastic-EM trace: per
    /// parameter, |mean(first half) − mean(second half)| / sd(tail). Constant
    /// parameters give 0.
    pub fn tail_drift(&self) -> Vec<f64> {
        let m = self.m.unwrap_or(self.trace.len()).min(self.trace.len());
        let tail = &self.trace[self.trace.len() - m..];
        let half = m / 2;
        if half == 0 {
            return vec![0.0; self.param_names.len()];
        }
        (0..self.param_names.len())
            .map(|k| {
                let xs: Vec<f64> = tail.iter().map(|t| t.params[k]).collect();
                let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
                let mu = mean(&xs);
                let sd = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1).max(1) as f64).sqrt();
                let d = (mean(&xs[..half]) - mean(&xs[m - half..])).abs();
                if sd > 0.0 {
                    d / sd
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Trace as CSV: `iteration,objective,<parameter names…>`.
    pub fn write_trace<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["iteration".to_string(), "objective".to_string()];
        header.extend(self.param_names.iter().cloned());
        wr.write_record(&header)?;
        for t in &self.trace {
            let mut rec = vec![t.iteration.to_string(), format!("{:?}", t.objective)];
            rec.extend(t.params.iter().map(|v| format!("{v:?}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Exact marginal log-likelihood of an all-linear model.
pub fn marginal_loglik(data: &Dataset, model: &ModelSpec) -> Result<f64> {
    Ok(individual_logliks(data, model)?.into_iter().sum())
}

/// Per-individual marginal log-likelihoods of an all-linear model.
pub fn individual_logliks(data: &Dataset, model: &ModelSpec) -> Result<Vec<f64>> {
    if !model.measurement.all_linear() {
        return Err(LgpError::Unsupported(
            "the marginal likelihood has no closed form with ordinal items; use the stochastic EM objective"
                .into(),
        ));
    }
    model.validate()?;
    let assign = model.prior_assignment(data)?;
    data.individuals
        .par_iter()
        .zip(assign.par_iter())
        .map(|(s, &g)| {
            let obs = linear_pseudo_obs(s, model.items())?;
            let post = GpPosterior::new(LatentPrior::new(&s.times, &model.priors[g])?, &obs)?;
            let ll = post.loglik(&obs);
            if ll.is_finite() {
                Ok(ll)
            } else {
                Err(LgpError::NonFinite { iteration: 0 })
            }
        })
        .collect()
}

/// Starting point for a fit: the moment-based default, optionally perturbed.
pub fn starting_model(data: &Dataset, template: &ModelSpec, opts: &FitOptions) -> Result<ModelSpec> {
    if opts.random_init {
        start::random_start(data, template, opts.seed)
    } else {
        start::default_start(data, template)
    }
}

/// Fit from `model0` as given: closed-form EM when every item is linear,
/// stochastic EM otherwise.
pub fn fit(data: &Dataset, model0: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    model0.validate()?;
    check_groups(data, model0)?;
    if model0.measurement.all_linear() && !opts.force_stem {
        fit_em_linear(data, model0, opts)
    } else {
        fit_stem(data, model0, opts)
    }
}

/// Fit a model whose priors are indexed by group label. Measurement
/// parameters are shared across groups; the constraints act on the first
/// (reference) group.
pub fn fit_grouped(data: &Dataset, model0: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if model0.is_grouped() && data.individuals.iter().any(|s| s.covariates.group.is_none()) {
        return Err(LgpError::InvalidModel(
            "grouped model needs a group label for every individual (missing group column?)".into(),
        ));
    }
    fit(data, model0, opts)
}

fn check_groups(data: &Dataset, model: &ModelSpec) -> Result<()> {
    let assign = model.prior_assignment(data)?;
    for (g, p) in model.priors.iter().enumerate() {
        if !assign.contains(&g) {
            return Err(LgpError::EmptyGroup(p.label.clone().unwrap_or_else(|| g.to_string())));
        }
    }
    Ok(())
}

pub(crate) fn at_iteration(err: LgpError, iteration: usize) -> LgpError {
    match err {
        LgpError::NonFinite { .. } => LgpError::NonFinite { iteration },
        LgpError::Optimizer { message, .. } => LgpError::Optimizer { iteration, message },
        e => e,
    }
}
