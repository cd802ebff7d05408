use std::path::Path;

use lgp::data::{ingest_csv, write_records, Dataset};
use lgp::fit::{
    bootstrap, fit_grouped, resolve_contrast, starting_model, BootstrapResult, FitResult, Fitter,
};
use lgp::posterior::{default_grid, posterior_analytic, posterior_mc, PosteriorCurve};
use lgp::rng::{stream, Stage};
use lgp::simulate::{simulate_dataset, TruthCurve};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{csv_err, ensure_dir, num, write_atomic, write_csv_with, write_json};

#[derive(Debug, Serialize, Deserialize)]
pub struct DataSummary {
    pub path: String,
    pub individuals: usize,
    pub observations: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub config: RunConfig,
    pub data: DataSummary,
    pub result: FitResult,
}

#[derive(Debug, Serialize)]
struct TruthFile<'a> {
    config: &'a RunConfig,
    param_names: Vec<String>,
    params: Vec<f64>,
    grid: &'a [f64],
    curves: &'a [TruthCurve],
}

#[derive(Debug, Serialize)]
struct CiRow {
    name: String,
    estimate: f64,
    lower: f64,
    upper: f64,
}

#[derive(Debug, Serialize)]
struct BootstrapReport<'a> {
    config: &'a RunConfig,
    data: DataSummary,
    fit: &'a FitResult,
    replicates_requested: usize,
    replicates_succeeded: usize,
    failed: usize,
    intervals: Vec<CiRow>,
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())
}

fn load_data(cfg: &RunConfig, path: &Path) -> Result<Dataset, CliError> {
    let schema = cfg.schema();
    if cfg.model.is_grouped() {
        let column = schema.group_column.clone().unwrap_or_default();
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let headers = rdr
            .headers()
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if column.is_empty() || !headers.iter().any(|h| h.trim() == column) {
            return Err(CliError::Config(format!(
                "the model has {} groups but {} has no group column `{column}`",
                cfg.model.priors.len(),
                path.display()
            )));
        }
    }
    let data = ingest_csv(path, &schema)?;
    if cfg.model.is_grouped() {
        for p in &cfg.model.priors {
            let label = p.label.as_deref().unwrap_or_default();
            if !data.groups.iter().any(|g| g == label) {
                return Err(CliError::Config(format!(
                    "group `{label}` of the model does not occur in {}",
                    path.display()
                )));
            }
        }
    }
    Ok(data)
}

fn summary(path: &Path, d: &Dataset) -> DataSummary {
    DataSummary {
        path: path.display().to_string(),
        individuals: d.n_individuals(),
        observations: d.n_observations(),
    }
}

fn run_fit(cfg: &RunConfig, data: &Dataset) -> Result<FitResult, CliError> {
    let mut model = cfg.model.clone();
    model.bind_horizon(data.time_horizon);
    let start = starting_model(data, &model, &cfg.fit)?;
    Ok(fit_grouped(data, &start, &cfg.fit)?)
}

fn print_estimates(f: &FitResult) {
    for ((name, v), fixed) in f.param_names.iter().zip(f.estimates()).zip(&f.fixed) {
        let tag = if *fixed { "  (fixed)" } else { "" };
        println!("  {name:<12} {v:>12.6}{tag}");
    }
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let sim_cfg = cfg.sim_config()?;
    let sim = simulate_dataset(&sim_cfg)?;
    ensure_dir(out)?;
    write_csv_with(&out.join("data.csv"), |w| {
        write_records(&sim.dataset, w).map_err(CliError::from)
    })?;
    let truth = TruthFile {
        config: cfg,
        param_names: cfg.model.report_names(),
        params: cfg.model.report_vector(),
        grid: &sim.grid,
        curves: &sim.truth,
    };
    write_json(&out.join("truth.json"), &truth)?;
    write_config(out, cfg)?;
    println!(
        "simulated N={} individuals, {} observations, seed {}",
        sim.dataset.n_individuals(),
        sim.dataset.n_observations(),
        sim_cfg.seed
    );
    Ok(())
}

pub fn fit(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_data(cfg, data_path)?;
    let result = run_fit(cfg, &data)?;
    ensure_dir(out)?;
    write_csv_with(&out.join("trace.csv"), |w| {
        w.write_record(
            ["iteration", "objective"]
                .into_iter()
                .map(String::from)
                .chain(result.param_names.iter().cloned()),
        )
        .map_err(csv_err)?;
        for t in &result.trace {
            let mut rec = vec![t.iteration.to_string(), num(t.objective)];
            rec.extend(t.params.iter().map(|v| num(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        Ok(())
    })?;
    let report = FitReport {
        config: cfg.clone(),
        data: summary(data_path, &data),
        result,
    };
    write_json(&out.join("fit.json"), &report)?;
    write_config(out, cfg)?;
    let r = &report.result;
    println!(
        "{:?} fit of {} individuals: objective {:.6}, {} iterations, {}",
        r.method,
        data.n_individuals(),
        r.loglik,
        r.iterations,
        r.reason
    );
    print_estimates(r);
    if !r.converged {
        return Err(CliError::Estimation(format!(
            "fit did not converge ({}); report written to {}",
            r.reason,
            out.join("fit.json").display()
        )));
    }
    Ok(())
}

fn quantile_column(alpha: f64) -> String {
    format!("q{:03}", (alpha * 1000.0).round() as i64)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn read_report(path: &Path) -> Result<FitReport, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read fit report {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: not a fit report: {e}", path.display())))
}

pub fn curve(report: &FitReport, cfg: &RunConfig, data_path: &Path, ids: &[String], out: &Path) -> Result<(), CliError> {
    let data = load_data(cfg, data_path)?;
    let mut model = report.result.psi_hat.clone();
    model.bind_horizon(data.time_horizon);
    let selected: Vec<usize> = if ids.is_empty() {
        (0..data.n_individuals()).collect()
    } else {
        ids.iter()
            .map(|id| {
                data.individuals.iter().position(|s| &s.id == id).ok_or_else(|| {
                    let available: Vec<&str> = data.individuals.iter().map(|s| s.id.as_str()).collect();
                    CliError::Config(format!("unknown id `{id}`; available ids: {}", available.join(", ")))
                })
            })
            .collect::<Result<_, _>>()?
    };
    let opts = &cfg.curve;
    let grid = default_grid(data.time_horizon, opts.grid_points);
    let seed = cfg.seed.unwrap_or(lgp::rng::DEFAULT_SEED);
    let curves: Vec<(usize, PosteriorCurve)> = {
        use rayon::prelude::*;
        selected
            .par_iter()
            .map(|&i| {
                let s = &data.individuals[i];
                let c = if model.measurement.all_linear() {
                    posterior_analytic(s, &model, &grid, &opts.quantiles)?
                } else {
                    let mut rng = stream(seed, Stage::Posterior, i as u64, 0);
                    posterior_mc(s, &model, &grid, &opts.quantiles, opts.samples, opts.burn_in, &mut rng)?
                };
                Ok((i, c))
            })
            .collect::<Result<_, lgp::LgpError>>()?
    };
    ensure_dir(out)?;
    for (i, c) in &curves {
        let id = &data.individuals[*i].id;
        write_csv_with(&out.join(format!("curve_{}.csv", file_stem(id))), |w| {
            let mut header = vec!["t".to_string(), "eap".to_string()];
            header.extend(c.quantiles.iter().map(|q| quantile_column(q.alpha)));
            w.write_record(&header).map_err(csv_err)?;
            for k in 0..c.grid.len() {
                let mut rec = vec![num(c.grid[k]), num(c.mean[k])];
                rec.extend(c.quantiles.iter().map(|q| num(q.values[k])));
                w.write_record(&rec).map_err(csv_err)?;
            }
            Ok(())
        })?;
    }
    write_config(out, cfg)?;
    println!("wrote {} posterior curves to {}", curves.len(), out.display());
    Ok(())
}

fn ci_rows(b: &BootstrapResult, fit: &FitResult, contrasts: &[String]) -> Result<Vec<CiRow>, CliError> {
    let est = fit.estimates();
    let mut rows: Vec<CiRow> = b
        .ci
        .iter()
        .zip(&est)
        .map(|(iv, e)| CiRow {
            name: iv.name.clone(),
            estimate: *e,
            lower: iv.lower,
            upper: iv.upper,
        })
        .collect();
    for (expr, iv) in contrasts.iter().zip(&b.contrasts) {
        let (a, c) = resolve_contrast(expr, &fit.param_names)?;
        rows.push(CiRow {
            name: iv.name.clone(),
            estimate: est[a] - c.map_or(0.0, |c| est[c]),
            lower: iv.lower,
            upper: iv.upper,
        });
    }
    Ok(rows)
}

pub fn bootstrap_cmd(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_data(cfg, data_path)?;
    for c in &cfg.bootstrap.contrasts {
        resolve_contrast(c, &cfg.model.report_names())?;
    }
    let point = run_fit(cfg, &data)?;
    if !point.converged {
        log::warn!("full-data fit did not converge ({}); bootstrapping from it anyway", point.reason);
    }
    let fitter = if cfg.model.measurement.all_linear() && !cfg.fit.force_stem {
        Fitter::Linear
    } else {
        Fitter::Stem
    };
    let b = bootstrap(&data, &point.psi_hat, fitter, &cfg.fit, &cfg.bootstrap)?;
    ensure_dir(out)?;
    let contrasts = &cfg.bootstrap.contrasts;
    write_csv_with(&out.join("replicates.csv"), |w| {
        let mut header = vec!["replicate".to_string()];
        header.extend(b.param_names.iter().cloned());
        header.extend(contrasts.iter().map(|c| c.trim().to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (r, (row, id)) in b.replicates.iter().zip(&b.replicate_ids).enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|v| num(*v)));
            rec.extend(b.contrast_replicates.iter().map(|c| num(c[r])));
            w.write_record(&rec).map_err(csv_err)?;
        }
        Ok(())
    })?;
    let rows = ci_rows(&b, &point, contrasts)?;
    write_csv_with(&out.join("ci.csv"), |w| {
        w.write_record(["name", "estimate", "lower", "upper"]).map_err(csv_err)?;
        for r in &rows {
            w.write_record([r.name.clone(), num(r.estimate), num(r.lower), num(r.upper)])
                .map_err(csv_err)?;
        }
        Ok(())
    })?;
    println!(
        "bootstrap: {} of {} replicates refit ({} failed); {:.0}% percentile intervals",
        b.replicates.len(),
        cfg.bootstrap.replicates,
        b.failed,
        100.0 * cfg.bootstrap.level
    );
    for r in &rows {
        println!("  {:<16} {:>10.4}  [{:.4}, {:.4}]", r.name, r.estimate, r.lower, r.upper);
    }
    let report = BootstrapReport {
        config: cfg,
        data: summary(data_path, &data),
        fit: &point,
        replicates_requested: cfg.bootstrap.replicates,
        replicates_succeeded: b.replicates.len(),
        failed: b.failed,
        intervals: rows,
    };
    write_json(&out.join("bootstrap.json"), &report)?;
    write_config(out, cfg)?;
    Ok(())
}
