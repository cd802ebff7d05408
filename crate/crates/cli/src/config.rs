//! Run configuration: a TOML document merged with command-line overrides.

use std::path::Path;

use lgp::data::{CsvSchema, ItemType};
use lgp::fit::{BootstrapOptions, FitOptions};
use lgp::model::ModelSpec;
use lgp::posterior::{DEFAULT_BURN_IN, DEFAULT_GRID_POINTS, DEFAULT_SAMPLES};
use lgp::rng::DEFAULT_SEED;
use lgp::simulate::{GroupShare, PerDay, SimConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for every stochastic stage. Section-level `seed` keys are
    /// overwritten by it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    /// Column mapping of the input CSV. Without it the data are read as
    /// `id,time,y1..yJ[,group]`, the layout `simulate` writes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<CsvSchema>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub bootstrap: BootstrapOptions,
    #[serde(default)]
    pub curve: CurveOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub days: usize,
    pub per_day: PerDay,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_mix: Option<Vec<GroupShare>>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveOptions {
    pub grid_points: usize,
    /// Pointwise posterior quantile levels written next to the EAP column.
    pub quantiles: Vec<f64>,
    /// Monte Carlo path (ordinal items): retained draws and burn-in sweeps.
    pub samples: usize,
    pub burn_in: usize,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions {
            grid_points: DEFAULT_GRID_POINTS,
            quantiles: vec![0.025, 0.975],
            samples: DEFAULT_SAMPLES,
            burn_in: DEFAULT_BURN_IN,
        }
    }
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub replicates: Option<usize>,
    pub quantiles: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Apply overrides, propagate the master seed and validate.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        let seed = o.seed.or(self.seed).unwrap_or(DEFAULT_SEED);
        self.seed = Some(seed);
        self.fit.seed = seed;
        self.bootstrap.seed = seed;
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        if let Some(b) = o.replicates {
            self.bootstrap.replicates = b;
        }
        if let Some(q) = &o.quantiles {
            self.curve.quantiles = q.clone();
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("[model]: {e}")))?;
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if let Some(s) = &self.simulate {
            self.sim_config_for(s)
                .validate()
                .map_err(|e| CliError::Config(format!("[simulate]: {e}")))?;
        }
        if let Some(d) = &self.data {
            let expected = self.model.items().len();
            if d.items.len() != expected {
                return bad(format!(
                    "[data]: {} item columns listed but the model has {expected} items",
                    d.items.len()
                ));
            }
        }
        let c = &self.curve;
        if c.grid_points == 0 {
            return bad("[curve]: grid_points must be at least 1".into());
        }
        if let Some(q) = c.quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return bad(format!("[curve]: quantile level {q} outside (0, 1)"));
        }
        if c.samples == 0 {
            return bad("[curve]: samples must be at least 1".into());
        }
        let b = &self.bootstrap;
        if !(b.level > 0.0 && b.level < 1.0) {
            return bad(format!("[bootstrap]: level {} outside (0, 1)", b.level));
        }
        Ok(())
    }

    fn sim_config_for(&self, s: &SimulateSection) -> SimConfig {
        SimConfig {
            n: s.n,
            days: s.days,
            per_day: s.per_day,
            model: self.model.clone(),
            seed: self.seed.unwrap_or(DEFAULT_SEED),
            group_mix: s.group_mix.clone(),
            grid_points: s.grid_points,
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let s = self
            .simulate
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no [simulate] section".into()))?;
        Ok(self.sim_config_for(s))
    }

    pub fn schema(&self) -> CsvSchema {
        if let Some(d) = &self.data {
            return d.clone();
        }
        let items: Vec<(String, ItemType)> = self
            .model
            .item_types()
            .into_iter()
            .enumerate()
            .map(|(j, t)| (format!("y{}", j + 1), t))
            .collect();
        let mut s = CsvSchema::wide(items);
        if self.model.is_grouped() {
            s.group_column = Some("group".into());
        }
        s
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }
}
