//! Deterministic moment-based starting values, with optional random jitter.

use rand::Rng;

use crate::basis::quantile_sorted;
use crate::data::{Dataset, ResponseValue};
use crate::error::Result;
use crate::kernels::KernelSpec;
use crate::measurement::{Item, LinearFactorItem, ProbitItem};
use crate::model::{LocationConstraint, ModelSpec, ParamMap, ScaleConstraint};
use crate::normal;
use crate::rng::{stream, Stage};

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn add(&mut self, y: f64) {
        self.n += 1.0;
        self.sum += y;
        self.sum_sq += y * y;
    }

    fn mean(&self) -> f64 {
        if self.n > 0.0 {
            self.sum / self.n
        } else {
            0.0
        }
    }

    fn var(&self) -> f64 {
        if self.n > 1.0 {
            ((self.sum_sq - self.sum * self.sum / self.n) / (self.n - 1.0)).max(1e-6)
        } else {
            1.0
        }
    }
}

/// Twice the median gap between consecutive observation times of the same
/// person.
pub fn median_gap_length_scale(data: &Dataset) -> f64 {
    let mut gaps: Vec<f64> = data
        .individuals
        .iter()
        .flat_map(|s| s.times.windows(2).map(|w| w[1] - w[0]))
        .filter(|g| *g > 0.0)
        .collect();
    if gaps.is_empty() {
        return 1.0;
    }
    gaps.sort_by(f64::total_cmp);
    2.0 * quantile_sorted(&gaps, 0.5)
}

/// Moment-based start for `template`'s structure: mean from the response
/// means, kernel scale from the response variance, κ from the median gap,
/// thresholds from the empirical category frequencies.
pub fn default_start(data: &Dataset, template: &ModelSpec) -> Result<ModelSpec> {
    let assign = template.prior_assignment(data)?;
    let n_groups = template.priors.len();
    let n_items = template.items().len();
    let mut per_group = vec![vec![Moments::default(); n_items]; n_groups];
    let mut pooled = vec![Moments::default(); n_items];
    let mut counts: Vec<Vec<f64>> = template
        .items()
        .iter()
        .map(|it| match it {
            Item::Probit(p) => vec![0.0; p.thresholds.len() + 1],
            Item::Linear(_) => Vec::new(),
        })
        .collect();
    for (s, &g) in data.individuals.iter().zip(&assign) {
        for row in &s.responses {
            for (j, y) in row.iter().enumerate() {
                match y {
                    ResponseValue::Continuous(y) => {
                        per_group[g][j].add(*y);
                        pooled[j].add(*y);
                    }
                    ResponseValue::Ordinal(l) => {
                        if let Some(c) = counts[j].get_mut(*l as usize) {
                            *c += 1.0;
                        }
                    }
                    ResponseValue::Missing => {}
                }
            }
        }
    }

    let fix_scale = template.constraints.scale == ScaleConstraint::FixKernelScale;
    let fix_first_location = template.constraints.location == LocationConstraint::FixFirstItemLocation;
    let kappa = median_gap_length_scale(data);

    // latent scale: c² (or the loading scale when c is pinned)
    let first_linear_var = match &template.items()[0] {
        Item::Linear(_) => Some(pooled[0].var()),
        Item::Probit(_) => None,
    };
    let c2 = if fix_scale {
        1.0
    } else {
        first_linear_var.map_or(1.0, |v| 0.5 * v)
    };
    let loading = |j: usize| -> f64 {
        match &template.items()[j] {
            Item::Linear(_) => {
                let v = pooled[j].var();
                if fix_scale {
                    (0.5 * v).sqrt()
                } else if j == 0 {
                    1.0
                } else {
                    first_linear_var.map_or((0.5 * v).sqrt(), |v1| (v / v1).sqrt())
                }
            }
            Item::Probit(_) => 1.0,
        }
    };
    let a1 = loading(0);

    // intercept per group, driven by the first item
    let cum = |j: usize, l: usize| -> f64 {
        let total: f64 = counts[j].iter().sum();
        let c: f64 = counts[j][..=l].iter().sum();
        let eps = 0.5 / total.max(1.0);
        (c / total.max(1.0)).clamp(eps, 1.0 - eps)
    };
    let probit_alpha = |a: f64| -> f64 {
        // b₁,₁ = Φ⁻¹(P(Y ≤ 0))·√(1 + a²c²) − aα = 0
        normal::quantile(cum(0, 0)) * (1.0 + a * a * c2).sqrt() / a
    };
    let alpha: Vec<f64> = (0..n_groups)
        .map(|g| match (&template.items()[0], fix_first_location) {
            (Item::Linear(_), true) => {
                let m = if per_group[g][0].n > 0.0 { per_group[g][0].mean() } else { pooled[0].mean() };
                m / a1
            }
            (Item::Linear(_), false) => {
                if g == 0 {
                    0.0
                } else {
                    (per_group[g][0].mean() - per_group[0][0].mean()) / a1
                }
            }
            (Item::Probit(_), true) => probit_alpha(a1),
            (Item::Probit(_), false) => 0.0,
        })
        .collect();
    let pooled_alpha = {
        let total: f64 = (0..n_groups).map(|g| per_group[g][0].n).sum();
        if total > 0.0 {
            (0..n_groups).map(|g| alpha[g] * per_group[g][0].n).sum::<f64>() / total
        } else {
            alpha[0]
        }
    };

    let mut m = template.clone();
    for (g, p) in m.priors.iter_mut().enumerate() {
        p.mean.coefficients.iter_mut().for_each(|c| *c = 0.0);
        p.mean.coefficients[0] = alpha[g];
        let c2_g = match (&template.items()[0], g) {
            (Item::Linear(_), g) if g > 0 && !fix_scale && per_group[g][0].n > 1.0 => {
                0.5 * per_group[g][0].var() / (a1 * a1)
            }
            _ => c2,
        };
        p.kernel = match &p.kernel {
            KernelSpec::SquaredExponential { .. } => KernelSpec::SquaredExponential {
                c: c2_g.sqrt(),
                kappa,
            },
            KernelSpec::Exponential { .. } => KernelSpec::Exponential {
                c: c2_g.sqrt(),
                kappa: (kappa / 2.0).sqrt().max(1e-3),
            },
            KernelSpec::Periodic { p: period, .. } => KernelSpec::Periodic {
                c: c2_g.sqrt(),
                kappa: 1.0,
                p: *period,
            },
            k @ KernelSpec::BasisLowRank { .. } => k.clone(),
        };
    }
    for (j, item) in m.measurement.items.iter_mut().enumerate() {
        let a = loading(j);
        *item = match item {
            Item::Linear(_) => {
                let v = pooled[j].var();
                Item::Linear(LinearFactorItem {
                    a,
                    b: pooled[j].mean() - a * pooled_alpha,
                    sigma2: 0.5 * v,
                })
            }
            Item::Probit(p) => {
                let scale = (1.0 + a * a * c2).sqrt();
                let mut th: Vec<f64> = (0..p.thresholds.len())
                    .map(|l| normal::quantile(cum(j, l)) * scale - a * pooled_alpha)
                    .collect();
                for l in 1..th.len() {
                    if th[l] < th[l - 1] + 1e-3 {
                        th[l] = th[l - 1] + 1e-3;
                    }
                }
                Item::Probit(ProbitItem { a, thresholds: th })
            }
        };
    }
    let m = m.enforce_constraints();
    m.validate()?;
    Ok(m)
}

/// Default start with every free coordinate shifted by U(−0.25, 0.25).
pub fn random_start(data: &Dataset, template: &ModelSpec, seed: u64) -> Result<ModelSpec> {
    let base = default_start(data, template)?;
    let map = ParamMap::new(&base)?;
    let mut rng = stream(seed, Stage::Init, 0, 0);
    let v: Vec<f64> = map
        .encode(&base)
        .into_iter()
        .map(|x| x + rng.random_range(-0.25..0.25))
        .collect();
    Ok(map.decode(&v))
}
