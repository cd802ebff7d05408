//! Individual-level nonparametric bootstrap with percentile intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_em_linear, fit_stem, FitOptions, FitResult};
use crate::basis::quantile_sorted;
use crate::data::Dataset;
use crate::error::{LgpError, Result};
use crate::model::ModelSpec;
use crate::rng::{stream, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fitter {
    Linear,
    Stem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Differences such as `c2[1] - c2[0]`, or the shorthand `c1sq - c0sq`.
    pub contrasts: Vec<String>,
    /// Two-sided coverage of the percentile intervals.
    pub level: f64,
    /// Largest tolerated share of failed refits.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 200,
            seed: crate::rng::DEFAULT_SEED,
            contrasts: Vec::new(),
            level: 0.95,
            max_failure_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub param_names: Vec<String>,
    /// One row per successful replicate, in [`ModelSpec::report_vector`] order.
    pub replicates: Vec<Vec<f64>>,
    /// Replicate index (0-based) of each row of `replicates`.
    pub replicate_ids: Vec<usize>,
    pub failed: usize,
    pub ci: Vec<Interval>,
    pub contrasts: Vec<Interval>,
    pub contrast_replicates: Vec<Vec<f64>>,
}

/// Bootstrap indices: within each group when the data are grouped, so every
/// replicate keeps the group sizes.
pub fn resample_indices(data: &Dataset, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = stream(seed, Stage::Bootstrap, b as u64, 0);
    let n = data.n_individuals();
    if !data.is_grouped() {
        return (0..n).map(|_| rng.random_range(0..n)).collect();
    }
    let mut out = Vec::with_capacity(n);
    let n_groups = data.groups.len();
    for g in 0..n_groups {
        let members: Vec<usize> = (0..n).filter(|&i| data.group_index(i) == g).collect();
        for _ in 0..members.len() {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    out
}

fn refit(data: &Dataset, start: &ModelSpec, fitter: Fitter, opts: &FitOptions) -> Result<FitResult> {
    match fitter {
        Fitter::Linear => fit_em_linear(data, start, opts),
        Fitter::Stem => fit_stem(data, start, opts),
    }
}

/// Bootstrap with `opts.replicates` resamples, each refit from `start`.
pub fn bootstrap(
    data: &Dataset,
    start: &ModelSpec,
    fitter: Fitter,
    fit_opts: &FitOptions,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    if opts.replicates == 0 {
        return Err(LgpError::InvalidModel("bootstrap needs at least one replicate".into()));
    }
    let sets: Vec<Vec<usize>> = (0..opts.replicates)
        .map(|b| resample_indices(data, opts.seed, b))
        .collect();
    bootstrap_from_indices(data, start, fitter, fit_opts, opts, &sets)
}

/// Bootstrap over explicitly given resamples.
pub fn bootstrap_from_indices(
    data: &Dataset,
    start: &ModelSpec,
    fitter: Fitter,
    fit_opts: &FitOptions,
    opts: &BootstrapOptions,
    index_sets: &[Vec<usize>],
) -> Result<BootstrapResult> {
    if index_sets.is_empty() {
        return Err(LgpError::InvalidModel("bootstrap needs at least one replicate".into()));
    }
    let names = start.report_names();
    let contrast_terms = opts
        .contrasts
        .iter()
        .map(|c| resolve_contrast(c, &names))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<Result<Vec<f64>>> = index_sets
        .par_iter()
        .map(|idx| {
            let d = data.resample(idx);
            refit(&d, start, fitter, fit_opts).map(|f| f.estimates())
        })
        .collect();
    let mut replicates = Vec::new();
    let mut replicate_ids = Vec::new();
    let mut failed = 0;
    for (b, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => {
                replicates.push(v);
                replicate_ids.push(b);
            }
            Err(e) => {
                log::warn!("bootstrap replicate {b} failed: {e}");
                failed += 1;
            }
        }
    }
    let total = index_sets.len();
    if replicates.is_empty() || failed as f64 > opts.max_failure_rate * total as f64 {
        return Err(LgpError::BootstrapFailures { failed, total });
    }
    let lo_p = 0.5 * (1.0 - opts.level);
    let hi_p = 1.0 - lo_p;
    let interval = |name: String, mut xs: Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        Interval {
            name,
            lower: quantile_sorted(&xs, lo_p),
            upper: quantile_sorted(&xs, hi_p),
        }
    };
    let ci = names
        .iter()
        .enumerate()
        .map(|(k, n)| interval(n.clone(), replicates.iter().map(|r| r[k]).collect()))
        .collect();
    let contrast_replicates: Vec<Vec<f64>> = contrast_terms
        .iter()
        .map(|(a, b)| replicates.iter().map(|r| r[*a] - b.map_or(0.0, |b| r[b])).collect())
        .collect();
    let contrasts = opts
        .contrasts
        .iter()
        .zip(&contrast_replicates)
        .map(|(c, xs)| interval(c.trim().to_string(), xs.clone()))
        .collect();
    Ok(BootstrapResult {
        param_names: names,
        replicates,
        replicate_ids,
        failed,
        ci,
        contrasts,
        contrast_replicates,
    })
}

fn resolve_name(token: &str, names: &[String]) -> Option<usize> {
    if let Some(k) = names.iter().position(|n| n == token) {
        return Some(k);
    }
    let alias = if let Some(label) = token.strip_prefix('c').and_then(|r| r.strip_suffix("sq")) {
        format!("c2[{label}]")
    } else if let Some(label) = token.strip_prefix("kappa") {
        format!("kappa[{label}]")
    } else if let Some(label) = token.strip_prefix("alpha") {
        format!("alpha0[{label}]")
    } else {
        return None;
    };
    names.iter().position(|n| *n == alias)
}

/// Parse `A - B` (or a single name) into report-vector indices.
pub fn resolve_contrast(expr: &str, names: &[String]) -> Result<(usize, Option<usize>)> {
    let unknown = |t: &str| {
        LgpError::InvalidModel(format!(
            "unknown parameter `{t}` in contrast `{expr}`; available: {}",
            names.join(", ")
        ))
    };
    let parts: Vec<&str> = expr.split(" - ").map(str::trim).collect();
    match parts.as_slice() {
        [a] => Ok((resolve_name(a, names).ok_or_else(|| unknown(a))?, None)),
        [a, b] => Ok((
            resolve_name(a, names).ok_or_else(|| unknown(a))?,
            Some(resolve_name(b, names).ok_or_else(|| unknown(b))?),
        )),
        _ => Err(LgpError::InvalidModel(format!(
            "contrast `{expr}` must have the form `A - B`"
        ))),
    }
}
