//! Model parameters Ψ, identifiability constraints, named parameter
//! vectors and the bijection onto an unconstrained optimizer vector.

use serde::{Deserialize, Serialize};

use crate::basis::MeanSpec;
use crate::data::{Dataset, IndividualSeries, ItemType};
use crate::error::{LgpError, Result};
use crate::kernels::KernelSpec;
use crate::measurement::{Item, LinearFactorItem, MeasurementSpec, ProbitItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConstraint {
    /// c = 1 for the reference group's kernel.
    FixKernelScale,
    /// a_1 = 1.
    FixFirstLoading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationConstraint {
    /// α₀ = 0 for the reference group's mean.
    FixInterceptZero,
    /// b_1 = 0 (linear) or b_{1,1} = 0 (probit).
    FixFirstItemLocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    pub scale: ScaleConstraint,
    pub location: LocationConstraint,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            scale: ScaleConstraint::FixFirstLoading,
            location: LocationConstraint::FixFirstItemLocation,
        }
    }
}

/// Mean and kernel of one covariate group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPrior {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
}

/// Ψ. A single prior entry means the structural model is shared by everyone;
/// several entries are matched to individuals by group label. The first
/// entry is the reference group for the identifiability constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub priors: Vec<GroupPrior>,
    pub measurement: MeasurementSpec,
    #[serde(default)]
    pub constraints: ConstraintSet,
}

impl ModelSpec {
    pub fn shared(mean: MeanSpec, kernel: KernelSpec, items: Vec<Item>, constraints: ConstraintSet) -> Self {
        ModelSpec {
            priors: vec![GroupPrior {
                label: None,
                mean,
                kernel,
            }],
            measurement: MeasurementSpec { items },
            constraints,
        }
    }

    pub fn is_grouped(&self) -> bool {
        self.priors.len() > 1
    }

    pub fn items(&self) -> &[Item] {
        &self.measurement.items
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.is_empty() {
            return Err(LgpError::InvalidModel("model has no prior".into()));
        }
        for p in &self.priors {
            p.mean.validate()?;
            p.kernel.validate()?;
        }
        if self.is_grouped() {
            let mut labels = Vec::new();
            for p in &self.priors {
                match &p.label {
                    Some(l) if !labels.contains(&l) => labels.push(l),
                    Some(l) => return Err(LgpError::InvalidModel(format!("group `{l}` listed twice"))),
                    None => {
                        return Err(LgpError::InvalidModel(
                            "every group prior needs a label".into(),
                        ))
                    }
                }
            }
        }
        self.measurement.validate()?;
        if self.constraints.scale == ScaleConstraint::FixKernelScale
            && !self.priors[0].kernel.is_stationary()
        {
            return Err(LgpError::ConflictingConstraints(
                "the basis low-rank kernel has no scale parameter to fix; use fix_first_loading"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Copy with every constrained entry set to its fixed value.
    pub fn enforce_constraints(&self) -> ModelSpec {
        let mut m = self.clone();
        match self.constraints.scale {
            ScaleConstraint::FixKernelScale => {
                m.priors[0].kernel = m.priors[0].kernel.with_scale(1.0);
            }
            ScaleConstraint::FixFirstLoading => match &mut m.measurement.items[0] {
                Item::Linear(i) => i.a = 1.0,
                Item::Probit(i) => i.a = 1.0,
            },
        }
        match self.constraints.location {
            LocationConstraint::FixInterceptZero => m.priors[0].mean.coefficients[0] = 0.0,
            LocationConstraint::FixFirstItemLocation => match &mut m.measurement.items[0] {
                Item::Linear(i) => i.b = 0.0,
                Item::Probit(p) => {
                    let shift = p.thresholds[0];
                    p.thresholds.iter_mut().for_each(|b| *b -= shift);
                }
            },
        }
        m
    }

    pub fn bind_horizon(&mut self, horizon: f64) {
        for p in &mut self.priors {
            p.mean.bind_horizon(horizon);
            p.kernel.bind_horizon(horizon);
        }
    }

    /// Check that the model can describe `data` and return, per individual,
    /// the index of its prior.
    pub fn prior_assignment(&self, data: &Dataset) -> Result<Vec<usize>> {
        if self.items().len() != data.n_items() {
            return Err(LgpError::InvalidModel(format!(
                "model has {} items, data has {}",
                self.items().len(),
                data.n_items()
            )));
        }
        for (j, (item, ty)) in self.items().iter().zip(&data.item_types).enumerate() {
            if item.item_type() != *ty {
                return Err(LgpError::InvalidModel(format!(
                    "item {} is {:?} in the model but {:?} in the data",
                    j + 1,
                    item.item_type(),
                    ty
                )));
            }
        }
        data.individuals
            .iter()
            .map(|s| self.prior_index(s))
            .collect()
    }

    pub fn prior_index(&self, s: &IndividualSeries) -> Result<usize> {
        if !self.is_grouped() {
            return Ok(0);
        }
        let g = s.covariates.group.as_ref().ok_or_else(|| {
            LgpError::InvalidModel(format!(
                "grouped model but individual {} has no group (missing group column?)",
                s.id
            ))
        })?;
        self.priors
            .iter()
            .position(|p| p.label.as_ref() == Some(g))
            .ok_or_else(|| LgpError::InvalidModel(format!("no prior for group `{g}`")))
    }

    pub fn prior_for(&self, s: &IndividualSeries) -> Result<&GroupPrior> {
        Ok(&self.priors[self.prior_index(s)?])
    }

    fn suffix(&self, g: usize) -> String {
        if self.is_grouped() {
            format!("[{}]", self.priors[g].label.as_deref().unwrap_or(""))
        } else {
            String::new()
        }
    }

    /// Names of the entries of [`ModelSpec::report_vector`].
    pub fn report_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (g, p) in self.priors.iter().enumerate() {
            let sfx = self.suffix(g);
            for d in 0..p.mean.n_coefficients() {
                names.push(format!("alpha{d}{sfx}"));
            }
            match &p.kernel {
                KernelSpec::SquaredExponential { .. } | KernelSpec::Exponential { .. } => {
                    names.push(format!("c2{sfx}"));
                    names.push(format!("kappa{sfx}"));
                }
                KernelSpec::Periodic { .. } => {
                    names.push(format!("c2{sfx}"));
                    names.push(format!("kappa{sfx}"));
                    names.push(format!("period{sfx}"));
                }
                KernelSpec::BasisLowRank { weights, .. } => {
                    for h in 1..=weights.len() {
                        names.push(format!("omega{h}{sfx}"));
                    }
                }
            }
        }
        for (j, item) in self.items().iter().enumerate() {
            let j = j + 1;
            match item {
                Item::Linear(_) => {
                    names.push(format!("a{j}"));
                    names.push(format!("b{j}"));
                    names.push(format!("sigma2_{j}"));
                }
                Item::Probit(p) => {
                    names.push(format!("a{j}"));
                    for l in 1..=p.thresholds.len() {
                        names.push(format!("d{j}_{l}"));
                    }
                }
            }
        }
        names
    }

    /// Parameters on their natural scale (kernel scale reported as c²).
    pub fn report_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for p in &self.priors {
            v.extend_from_slice(&p.mean.coefficients);
            match &p.kernel {
                KernelSpec::SquaredExponential { c, kappa } | KernelSpec::Exponential { c, kappa } => {
                    v.extend([c * c, *kappa]);
                }
                KernelSpec::Periodic { c, kappa, p } => v.extend([c * c, *kappa, *p]),
                KernelSpec::BasisLowRank { weights, .. } => v.extend_from_slice(weights),
            }
        }
        for item in self.items() {
            match item {
                Item::Linear(i) => v.extend([i.a, i.b, i.sigma2]),
                Item::Probit(p) => {
                    v.push(p.a);
                    v.extend_from_slice(&p.thresholds);
                }
            }
        }
        v
    }

    /// Inverse of [`ModelSpec::report_vector`], keeping the structure of `self`.
    pub fn from_report(&self, v: &[f64]) -> Result<ModelSpec> {
        let expected = self.report_names().len();
        if v.len() != expected {
            return Err(LgpError::DimensionMismatch {
                expected,
                got: v.len(),
            });
        }
        let mut k = 0;
        let mut take = |n: usize| {
            let s = &v[k..k + n];
            k += n;
            s.to_vec()
        };
        let mut m = self.clone();
        for p in &mut m.priors {
            p.mean.coefficients = take(p.mean.n_coefficients());
            p.kernel = match &p.kernel {
                KernelSpec::SquaredExponential { .. } => {
                    let x = take(2);
                    KernelSpec::SquaredExponential {
                        c: x[0].max(0.0).sqrt(),
                        kappa: x[1],
                    }
                }
                KernelSpec::Exponential { .. } => {
                    let x = take(2);
                    KernelSpec::Exponential {
                        c: x[0].max(0.0).sqrt(),
                        kappa: x[1],
                    }
                }
                KernelSpec::Periodic { .. } => {
                    let x = take(3);
                    KernelSpec::Periodic {
                        c: x[0].max(0.0).sqrt(),
                        kappa: x[1],
                        p: x[2],
                    }
                }
                KernelSpec::BasisLowRank { weights, basis } => KernelSpec::BasisLowRank {
                    weights: take(weights.len()),
                    basis: basis.clone(),
                },
            };
        }
        for item in &mut m.measurement.items {
            match item {
                Item::Linear(i) => {
                    let x = take(3);
                    *i = LinearFactorItem {
                        a: x[0],
                        b: x[1],
                        sigma2: x[2],
                    };
                }
                Item::Probit(p) => {
                    let x = take(1 + p.thresholds.len());
                    *p = ProbitItem {
                        a: x[0],
                        thresholds: x[1..].to_vec(),
                    };
                }
            }
        }
        Ok(m)
    }

    /// Per report entry, whether a constraint pins it.
    pub fn fixed_mask(&self) -> Vec<bool> {
        let names = self.report_names();
        let mut mask = vec![false; names.len()];
        let sfx = self.suffix(0);
        let mark = |mask: &mut Vec<bool>, name: String| {
            if let Some(i) = names.iter().position(|n| *n == name) {
                mask[i] = true;
            }
        };
        match self.constraints.scale {
            ScaleConstraint::FixKernelScale => mark(&mut mask, format!("c2{sfx}")),
            ScaleConstraint::FixFirstLoading => mark(&mut mask, "a1".into()),
        }
        match (self.constraints.location, &self.items()[0]) {
            (LocationConstraint::FixInterceptZero, _) => mark(&mut mask, format!("alpha0{sfx}")),
            (LocationConstraint::FixFirstItemLocation, Item::Linear(_)) => mark(&mut mask, "b1".into()),
            (LocationConstraint::FixFirstItemLocation, Item::Probit(_)) => {
                mark(&mut mask, "d1_1".into())
            }
        }
        mask
    }

    pub fn item_types(&self) -> Vec<ItemType> {
        self.items().iter().map(Item::item_type).collect()
    }
}

/// Bound on log-scale optimizer coordinates.
pub const LOG_BOUND: f64 = 30.0;

/// Free-coordinate layout of one group prior.
#[derive(Debug, Clone)]
pub struct PriorLayout {
    pub fix_intercept: bool,
    pub fix_scale: bool,
    pub coefficient_scales: Vec<f64>,
    pub n_kernel: usize,
}

impl PriorLayout {
    pub fn new(prior: &GroupPrior, is_reference: bool, constraints: &ConstraintSet) -> Self {
        PriorLayout {
            fix_intercept: is_reference && constraints.location == LocationConstraint::FixInterceptZero,
            fix_scale: is_reference && constraints.scale == ScaleConstraint::FixKernelScale,
            coefficient_scales: prior.mean.coefficient_scales(),
            n_kernel: prior.kernel.n_free(),
        }
    }

    pub fn n_mean_free(&self) -> usize {
        self.coefficient_scales.len() - usize::from(self.fix_intercept)
    }

    pub fn n_kernel_free(&self) -> usize {
        self.n_kernel - usize::from(self.fix_scale)
    }

    pub fn n_free(&self) -> usize {
        self.n_mean_free() + self.n_kernel_free()
    }

    /// Free mean coordinates: α_d · T^{deg d}, i.e. coefficients on time
    /// rescaled to [0, 1].
    pub fn encode_mean(&self, mean: &MeanSpec) -> Vec<f64> {
        let skip = usize::from(self.fix_intercept);
        mean.coefficients
            .iter()
            .zip(&self.coefficient_scales)
            .skip(skip)
            .map(|(a, s)| a * s)
            .collect()
    }

    pub fn decode_mean(&self, template: &MeanSpec, v: &[f64]) -> MeanSpec {
        let mut m = template.clone();
        let skip = usize::from(self.fix_intercept);
        if self.fix_intercept {
            m.coefficients[0] = 0.0;
        }
        for (k, x) in v.iter().enumerate() {
            m.coefficients[k + skip] = x / self.coefficient_scales[k + skip];
        }
        m
    }

    pub fn encode_kernel(&self, kernel: &KernelSpec) -> Vec<f64> {
        let f = kernel.to_free();
        f[usize::from(self.fix_scale)..].to_vec()
    }

    pub fn decode_kernel(&self, template: &KernelSpec, v: &[f64]) -> KernelSpec {
        let mut full = Vec::with_capacity(self.n_kernel);
        if self.fix_scale {
            full.push(0.0);
        }
        full.extend_from_slice(v);
        template.from_free(&full)
    }

    pub fn kernel_bounds(&self, template: &KernelSpec) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_kernel_free();
        if template.is_stationary() {
            (vec![-LOG_BOUND; n], vec![LOG_BOUND; n])
        } else {
            (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
        }
    }

    pub fn encode(&self, p: &GroupPrior) -> Vec<f64> {
        let mut v = self.encode_mean(&p.mean);
        v.extend(self.encode_kernel(&p.kernel));
        v
    }

    pub fn decode(&self, template: &GroupPrior, v: &[f64]) -> GroupPrior {
        let nm = self.n_mean_free();
        GroupPrior {
            label: template.label.clone(),
            mean: self.decode_mean(&template.mean, &v[..nm]),
            kernel: self.decode_kernel(&template.kernel, &v[nm..]),
        }
    }
}

/// Free-coordinate layout of one item.
///
/// Linear: (a, b, ln σ²). Probit: (a, b_1, ln(b_2 − b_1), …). Entries pinned
/// by a constraint are left out.
#[derive(Debug, Clone, Copy)]
pub struct ItemLayout {
    pub fix_loading: bool,
    pub fix_location: bool,
    pub n_thresholds: Option<usize>,
}

impl ItemLayout {
    pub fn new(item: &Item, is_first: bool, constraints: &ConstraintSet) -> Self {
        ItemLayout {
            fix_loading: is_first && constraints.scale == ScaleConstraint::FixFirstLoading,
            fix_location: is_first && constraints.location == LocationConstraint::FixFirstItemLocation,
            n_thresholds: match item {
                Item::Linear(_) => None,
                Item::Probit(p) => Some(p.thresholds.len()),
            },
        }
    }

    pub fn n_free(&self) -> usize {
        let base = match self.n_thresholds {
            None => 3,
            Some(n) => 1 + n,
        };
        base - usize::from(self.fix_loading) - usize::from(self.fix_location)
    }

    pub fn encode(&self, item: &Item) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_free());
        if !self.fix_loading {
            v.push(item.loading());
        }
        match item {
            Item::Linear(i) => {
                if !self.fix_location {
                    v.push(i.b);
                }
                v.push(i.sigma2.ln());
            }
            Item::Probit(p) => {
                if !self.fix_location {
                    v.push(p.thresholds[0]);
                }
                v.extend(p.thresholds.windows(2).map(|w| (w[1] - w[0]).ln()));
            }
        }
        v
    }

    pub fn decode(&self, template: &Item, v: &[f64]) -> Item {
        let mut k = 0;
        let mut next = || {
            let x = v[k];
            k += 1;
            x
        };
        let a = if self.fix_loading { 1.0 } else { next() };
        match template {
            Item::Linear(_) => {
                let b = if self.fix_location { 0.0 } else { next() };
                let sigma2 = next().exp();
                Item::Linear(LinearFactorItem { a, b, sigma2 })
            }
            Item::Probit(p) => {
                let first = if self.fix_location { 0.0 } else { next() };
                let mut thresholds = Vec::with_capacity(p.thresholds.len());
                thresholds.push(first);
                for _ in 1..p.thresholds.len() {
                    let prev = *thresholds.last().unwrap();
                    thresholds.push(prev + next().exp());
                }
                Item::Probit(ProbitItem { a, thresholds })
            }
        }
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_free();
        let n_log = match self.n_thresholds {
            None => 1,
            Some(t) => t - 1,
        };
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for k in n - n_log..n {
            lo[k] = -LOG_BOUND;
            hi[k] = LOG_BOUND;
        }
        (lo, hi)
    }

    /// Map a gradient with respect to natural parameters (a, b or thresholds,
    /// σ²) onto free coordinates at the free point `v`.
    pub fn chain_gradient(&self, template: &Item, v: &[f64], g_a: f64, g_loc: &[f64], g_sigma2: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_free());
        if !self.fix_loading {
            out.push(g_a);
        }
        let decoded = self.decode(template, v);
        match decoded {
            Item::Linear(i) => {
                if !self.fix_location {
                    out.push(g_loc[0]);
                }
                out.push(g_sigma2 * i.sigma2);
            }
            Item::Probit(p) => {
                let n = p.thresholds.len();
                if !self.fix_location {
                    out.push(g_loc.iter().sum());
                }
                for m in 1..n {
                    let gap = p.thresholds[m] - p.thresholds[m - 1];
                    out.push(gap * g_loc[m..].iter().sum::<f64>());
                }
            }
        }
        out
    }
}

/// Bijection between a constrained [`ModelSpec`] and an unconstrained vector.
#[derive(Debug, Clone)]
pub struct ParamMap {
    pub template: ModelSpec,
    pub priors: Vec<PriorLayout>,
    pub items: Vec<ItemLayout>,
}

impl ParamMap {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        model.validate()?;
        let c = &model.constraints;
        Ok(ParamMap {
            template: model.enforce_constraints(),
            priors: model
                .priors
                .iter()
                .enumerate()
                .map(|(g, p)| PriorLayout::new(p, g == 0, c))
                .collect(),
            items: model
                .items()
                .iter()
                .enumerate()
                .map(|(j, it)| ItemLayout::new(it, j == 0, c))
                .collect(),
        })
    }

    pub fn n_free(&self) -> usize {
        self.priors.iter().map(PriorLayout::n_free).sum::<usize>()
            + self.items.iter().map(ItemLayout::n_free).sum::<usize>()
    }

    pub fn prior_offsets(&self) -> Vec<usize> {
        let mut k = 0;
        self.priors
            .iter()
            .map(|l| {
                let o = k;
                k += l.n_free();
                o
            })
            .collect()
    }

    pub fn item_offsets(&self) -> Vec<usize> {
        let mut k: usize = self.priors.iter().map(PriorLayout::n_free).sum();
        self.items
            .iter()
            .map(|l| {
                let o = k;
                k += l.n_free();
                o
            })
            .collect()
    }

    pub fn encode(&self, model: &ModelSpec) -> Vec<f64> {
        let m = model.enforce_constraints();
        let mut v = Vec::with_capacity(self.n_free());
        for (l, p) in self.priors.iter().zip(&m.priors) {
            v.extend(l.encode(p));
        }
        for (l, it) in self.items.iter().zip(m.items()) {
            v.extend(l.encode(it));
        }
        v
    }

    pub fn decode(&self, v: &[f64]) -> ModelSpec {
        let mut m = self.template.clone();
        for ((l, o), p) in self.priors.iter().zip(self.prior_offsets()).zip(&mut m.priors) {
            *p = l.decode(p, &v[o..o + l.n_free()]);
        }
        for ((l, o), it) in self.items.iter().zip(self.item_offsets()).zip(&mut m.measurement.items) {
            *it = l.decode(it, &v[o..o + l.n_free()]);
        }
        m
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.n_free());
        let mut hi = Vec::with_capacity(self.n_free());
        for (l, p) in self.priors.iter().zip(&self.template.priors) {
            lo.extend(std::iter::repeat_n(f64::NEG_INFINITY, l.n_mean_free()));
            hi.extend(std::iter::repeat_n(f64::INFINITY, l.n_mean_free()));
            let (a, b) = l.kernel_bounds(&p.kernel);
            lo.extend(a);
            hi.extend(b);
        }
        for l in &self.items {
            let (a, b) = l.bounds();
            lo.extend(a);
            hi.extend(b);
        }
        (lo, hi)
    }
}

/// Forward transform of a model plus the map that inverts it.
pub fn apply_constraints(model: &ModelSpec) -> Result<(Vec<f64>, ParamMap)> {
    let map = ParamMap::new(model)?;
    Ok((map.encode(model), map))
}
