//! Synthetic EMA designs, truth curves and recovery metrics.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::quantile_sorted;
use crate::data::{CovariateProfile, Dataset, IndividualSeries};
use crate::error::{LgpError, Result};
use crate::fit::FitResult;
use crate::gaussian::{mvn_sample, GaussianSurrogate};
use crate::measurement::item_sample;
use crate::model::ModelSpec;
use crate::posterior::{default_grid, PosteriorCurve, DEFAULT_GRID_POINTS};
use crate::rng::{stream, Stage, DEFAULT_SEED};

/// Measurements per day: a fixed count or a uniform draw from `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDay {
    Fixed(usize),
    Range { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupShare {
    pub label: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub days: usize,
    pub per_day: PerDay,
    pub model: ModelSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Group shares; individuals are assigned in contiguous blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_mix: Option<Vec<GroupShare>>,
    /// Points of the scoring grid on [0, days].
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

impl SimConfig {
    pub fn new(n: usize, days: usize, per_day: usize, model: ModelSpec, seed: u64) -> Self {
        SimConfig {
            n,
            days,
            per_day: PerDay::Fixed(per_day),
            model,
            seed,
            group_mix: None,
            grid_points: DEFAULT_GRID_POINTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LgpError::InvalidModel(m.into()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.days == 0 {
            return bad("days must be at least 1");
        }
        match self.per_day {
            PerDay::Fixed(0) => return bad("per_day must be at least 1"),
            PerDay::Range { min, max } if min == 0 || min > max => {
                return bad("per_day range needs 1 ≤ min ≤ max")
            }
            _ => {}
        }
        self.model.validate()?;
        match (&self.group_mix, self.model.is_grouped()) {
            (Some(mix), _) => {
                if mix.is_empty() || mix.iter().any(|g| !(g.share > 0.0 && g.share.is_finite())) {
                    return bad("group shares must be positive");
                }
                if self.model.is_grouped() {
                    for g in mix {
                        if !self.model.priors.iter().any(|p| p.label.as_ref() == Some(&g.label)) {
                            return Err(LgpError::InvalidModel(format!(
                                "group_mix label `{}` has no prior in the model",
                                g.label
                            )));
                        }
                    }
                }
            }
            (None, true) => return bad("a grouped model needs group_mix"),
            (None, false) => {}
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.days as f64
    }

    /// Group label of individual i.
    pub fn group_of(&self, i: usize) -> Option<&str> {
        let mix = self.group_mix.as_ref()?;
        let total: f64 = mix.iter().map(|g| g.share).sum();
        let u = (i as f64 + 0.5) / self.n as f64;
        let mut acc = 0.0;
        for g in mix {
            acc += g.share / total;
            if u < acc {
                return Some(&g.label);
            }
        }
        mix.last().map(|g| g.label.as_str())
    }
}

/// Signal-contingent schedule: within each day d, uniform times in [d, d+1),
/// sorted.
pub fn sample_schedule<R: Rng + ?Sized>(config: &SimConfig, _individual: usize, rng: &mut R) -> Vec<f64> {
    let mut times = Vec::new();
    for d in 0..config.days {
        let k = match config.per_day {
            PerDay::Fixed(k) => k,
            PerDay::Range { min, max } => rng.random_range(min..=max),
        };
        let mut day: Vec<f64> = (0..k).map(|_| d as f64 + rng.random::<f64>()).collect();
        day.sort_by(f64::total_cmp);
        times.extend(day);
    }
    times
}

/// True latent curve of one simulated individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCurve {
    pub id: String,
    /// θ at the observation times.
    pub theta_obs: Vec<f64>,
    /// θ on the scoring grid, drawn jointly with `theta_obs`.
    pub theta_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub dataset: Dataset,
    pub grid: Vec<f64>,
    pub truth: Vec<TruthCurve>,
}

pub fn simulate_dataset(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    let mut model = config.model.clone();
    model.bind_horizon(config.horizon());
    let grid = default_grid(config.horizon(), config.grid_points);
    let per = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(config.seed, Stage::Simulate, i as u64, 0);
            let times = sample_schedule(config, i, &mut rng);
            let group = config.group_of(i).map(str::to_string);
            let prior = match &group {
                Some(g) if model.is_grouped() => model
                    .priors
                    .iter()
                    .find(|p| p.label.as_ref() == Some(g))
                    .expect("validated group label"),
                _ => &model.priors[0],
            };
            let mut all = times.clone();
            all.extend_from_slice(&grid);
            let joint = GaussianSurrogate::new(&prior.mean, &prior.kernel, &all)?;
            let theta: DVector<f64> = mvn_sample(&joint, &mut rng);
            let s = times.len();
            let responses = (0..s)
                .map(|k| model.items().iter().map(|it| item_sample(it, theta[k], &mut rng)).collect())
                .collect();
            let id = format!("{}", i + 1);
            let series = IndividualSeries {
                id: id.clone(),
                times,
                responses,
                covariates: CovariateProfile {
                    group,
                    ..Default::default()
                },
            };
            let truth = TruthCurve {
                id,
                theta_obs: theta.rows(0, s).iter().copied().collect(),
                theta_grid: theta.rows(s, grid.len()).iter().copied().collect(),
            };
            Ok((series, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    let (individuals, truth): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let groups = match &config.group_mix {
        Some(mix) => mix.iter().map(|g| g.label.clone()).collect(),
        None => Vec::new(),
    };
    let item_names = (1..=model.items().len()).map(|j| format!("y{j}")).collect();
    let dataset = Dataset::new(individuals, item_names, model.item_types(), groups, config.horizon())?;
    Ok(Simulation { dataset, grid, truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub names: Vec<String>,
    /// `None` for parameters pinned by a constraint.
    pub mse: Vec<Option<f64>>,
    pub replications: usize,
}

impl MseReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        let k = self.names.iter().position(|n| n == name)?;
        self.mse[k]
    }

    /// Table rows `name,mse`, with `·` for constrained parameters.
    pub fn rows(&self) -> Vec<(String, String)> {
        self.names
            .iter()
            .zip(&self.mse)
            .map(|(n, m)| (n.clone(), m.map_or("·".to_string(), |v| format!("{v:.3e}"))))
            .collect()
    }
}

/// Mean over replications of (estimate − truth)², per parameter.
pub fn mse_report(truth: &ModelSpec, fits: &[FitResult]) -> Result<MseReport> {
    let names = truth.report_names();
    let t = truth.report_vector();
    let fixed = truth.fixed_mask();
    if fits.is_empty() {
        return Err(LgpError::InvalidModel("no fits to score".into()));
    }
    let mut sums = vec![0.0; t.len()];
    for f in fits {
        let e = f.estimates();
        if e.len() != t.len() {
            return Err(LgpError::DimensionMismatch {
                expected: t.len(),
                got: e.len(),
            });
        }
        for k in 0..t.len() {
            sums[k] += (e[k] - t[k]).powi(2);
        }
    }
    Ok(MseReport {
        mse: sums
            .iter()
            .zip(&fixed)
            .map(|(s, &fx)| (!fx).then(|| s / fits.len() as f64))
            .collect(),
        names,
        replications: fits.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecoveryReport {
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    /// d_i / e_i; NaN when e_i = 0.
    pub ratio: Vec<f64>,
    pub median_ratio: f64,
    /// Share of finite ratios below 1.
    pub share_below_one: f64,
}

fn trapezoid(grid: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    grid.windows(2)
        .enumerate()
        .map(|(k, w)| 0.5 * (w[1] - w[0]) * (f(k) + f(k + 1)))
        .sum()
}

/// d_i = ‖θ_i − θ̂_i‖ and e_i = ‖θ_i − m̂‖ in L²(grid) by the trapezoid rule.
/// `baseline` holds the fitted population mean on the grid, either one curve
/// for everyone or one per individual.
pub fn curve_recovery(
    grid: &[f64],
    truth: &[Vec<f64>],
    curves: &[PosteriorCurve],
    baseline: &[Vec<f64>],
) -> Result<CurveRecoveryReport> {
    if truth.len() != curves.len() || !(baseline.len() == 1 || baseline.len() == truth.len()) {
        return Err(LgpError::DimensionMismatch {
            expected: truth.len(),
            got: curves.len(),
        });
    }
    let g = grid.len();
    let mismatch = |got: usize| LgpError::DimensionMismatch { expected: g, got };
    let mut d = Vec::with_capacity(truth.len());
    let mut e = Vec::with_capacity(truth.len());
    for (i, (th, c)) in truth.iter().zip(curves).enumerate() {
        let base = &baseline[if baseline.len() == 1 { 0 } else { i }];
        if th.len() != g {
            return Err(mismatch(th.len()));
        }
        if c.grid.len() != g || c.grid.iter().zip(grid).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(LgpError::InvalidModel(format!(
                "posterior curve {i} is on a different grid"
            )));
        }
        if base.len() != g {
            return Err(mismatch(base.len()));
        }
        d.push(trapezoid(grid, |k| (th[k] - c.mean[k]).powi(2)).sqrt());
        e.push(trapezoid(grid, |k| (th[k] - base[k]).powi(2)).sqrt());
    }
    let ratio: Vec<f64> = d
        .iter()
        .zip(&e)
        .map(|(d, e)| if *e > 0.0 { d / e } else { f64::NAN })
        .collect();
    let mut finite: Vec<f64> = ratio.iter().copied().filter(|r| r.is_finite()).collect();
    finite.sort_by(f64::total_cmp);
    let (median_ratio, share_below_one) = if finite.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            quantile_sorted(&finite, 0.5),
            finite.iter().filter(|r| **r < 1.0).count() as f64 / finite.len() as f64,
        )
    };
    Ok(CurveRecoveryReport {
        d,
        e,
        ratio,
        median_ratio,
        share_below_one,
    })
}
