//! The four commands. Each returns the `results` section of the report and
//! writes its tables into the output directory.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use extctl::data::{apply_eligibility, load_pooled, CovariateTable, EligibilityFilter};
use extctl::design::{aipw_power, gamma_pilot, gamma_smd, ratio_grid, rct_ratio, solve_n1, PowerSpec, SampleSize};
use extctl::estimators::{trim_overlap, Method};
use extctl::inference::{standardized_bias, subsample_bootstrap_psm};
use extctl::nuisance::CrossFitPlan;
use extctl::pipeline::{bootstrap_method, default_refit, estimate};
use extctl::simulation::{run_mc, sweep_beta};
use extctl::stats::{derive_seed, sample_sd};

use crate::config::{resolve, DesignConfig, EstimateConfig, PilotConfig, SimulateConfig, SweepJob};
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;

#[derive(Serialize)]
struct BiasRow {
    method: Method,
    tau_hat: f64,
    se: f64,
    ci_lower: f64,
    ci_upper: f64,
    n1_used: usize,
    n0_used: usize,
    tau_expected: f64,
    standardized_bias: f64,
}

pub fn estimate_cmd(cfg: &EstimateConfig, config_path: &Path, seed: u64, out: &mut OutputDir) -> CliResult<Value> {
    let data = resolve(config_path, &cfg.data);
    let loaded = load_pooled(&data, &cfg.schema)?;
    let (sample, eligibility) = if cfg.schema.eligibility.is_empty() {
        (loaded, None)
    } else {
        let (s, r) = apply_eligibility(&loaded, &EligibilityFilter::new(cfg.schema.eligibility.clone()))?;
        (s, Some(r))
    };
    log::info!("loaded {} rows ({} treated, {} controls)", sample.n(), sample.n1(), sample.n0());

    let (nuis, report) = estimate(&sample, &cfg.pipeline, derive_seed(seed, 0))?;
    let mut estimates = report.estimates.clone();

    if let Some(boot) = &cfg.inference.bootstrap {
        for (k, est) in estimates.iter_mut().enumerate() {
            if boot.methods.as_ref().is_some_and(|ms| !ms.contains(&est.method)) {
                continue;
            }
            let refit = boot.refit.unwrap_or_else(|| default_refit(est.method));
            let s = bootstrap_method(
                &sample,
                &nuis,
                &cfg.pipeline,
                est.method,
                boot.replicates,
                refit,
                derive_seed(seed, 1 + k as u64),
            )?;
            est.diagnostics.insert(
                "bootstrap".into(),
                json!({ "variance": s.variance, "replicates": s.replicates, "failed": s.failed, "refit": refit }),
            );
        }
    }

    if let Some(sub) = &cfg.inference.psm_subsample {
        let e = nuis.e_hat.as_deref().ok_or(extctl::Error::MissingComponent("propensity"))?;
        let (view, e_view) = if cfg.pipeline.trim_psm {
            let (rows, _) = trim_overlap(&sample, e)?;
            (sample.subset(&rows)?, rows.iter().map(|&i| e[i]).collect())
        } else {
            (sample.clone(), e.to_vec())
        };
        let s = subsample_bootstrap_psm(
            &view,
            &e_view,
            sub.size,
            sub.replicates,
            derive_seed(seed, 100),
            &cfg.pipeline.matching,
        )?;
        if let Some(est) = estimates.iter_mut().find(|e| e.method == Method::Psm) {
            est.diagnostics.insert(
                "subsample".into(),
                json!({ "variance": s.variance, "replicates": s.replicates, "failed": s.failed }),
            );
        }
    }

    let controls: Vec<f64> = sample.control_indices().iter().map(|&i| sample.outcome()[i]).collect();
    let sd_hist = sample_sd(&controls);
    let bias: Vec<BiasRow> = estimates
        .iter()
        .map(|est| {
            Ok(BiasRow {
                method: est.method,
                tau_hat: est.tau_hat,
                se: est.variance.sqrt(),
                ci_lower: est.ci95.0,
                ci_upper: est.ci95.1,
                n1_used: est.n1_used,
                n0_used: est.n0_used,
                tau_expected: cfg.expected_effect,
                standardized_bias: standardized_bias(est.tau_hat, cfg.expected_effect, sd_hist)?,
            })
        })
        .collect::<extctl::Result<_>>()?;
    out.write_csv("bias_table.csv", &bias)?;

    Ok(json!({
        "cohort": { "n": sample.n(), "n1": sample.n1(), "n0": sample.n0(), "control_outcome_sd": sd_hist, "eligibility": eligibility },
        "estimates": estimates,
        "overlap": report.overlap,
        "variance_components": report.components,
        "rho0": nuis.rho0,
        "gamma_hat": report.components.gamma,
        "nuisance": nuis.summary(),
    }))
}

#[derive(Serialize)]
struct PowerRow {
    n1: f64,
    tau: f64,
    power: f64,
}

#[derive(Serialize)]
struct SampleSizeRow {
    target_power: f64,
    status: &'static str,
    n1: Option<u64>,
    power: Option<f64>,
    max_power: Option<f64>,
}

fn parse_cell(cell: &str, row: usize, column: &str) -> CliResult<Option<f64>> {
    let t = cell.trim();
    if t.is_empty() || t == "NA" {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|_| {
        CliError::Core(extctl::Error::Parse { row, column: column.into(), message: format!("`{t}` is not a number") })
    })
}

/// Splits a pilot covariate CSV into (proxy trial, historical) tables.
fn load_pilot(pilot: &PilotConfig, config_path: &Path) -> CliResult<(CovariateTable, CovariateTable)> {
    let path = resolve(config_path, &pilot.data);
    let mut rdr = csv::Reader::from_path(&path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Core(extctl::Error::Validation(format!("pilot data lacks column `{name}`"))))
    };
    let cohort_col = find(&pilot.cohort)?;
    let cols: Vec<usize> = pilot.covariates.iter().map(|c| find(c)).collect::<CliResult<_>>()?;
    let mut proxy = vec![Vec::new(); cols.len()];
    let mut hist = vec![Vec::new(); cols.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let target = match parse_cell(&record[cohort_col], r + 1, &pilot.cohort)? {
            Some(v) if v == 1.0 => &mut proxy,
            Some(v) if v == 0.0 => &mut hist,
            _ => {
                return Err(CliError::Core(extctl::Error::Parse {
                    row: r + 1,
                    column: pilot.cohort.clone(),
                    message: "cohort must be 0 or 1".into(),
                }))
            }
        };
        for (k, &j) in cols.iter().enumerate() {
            target[k].push(parse_cell(&record[j], r + 1, &pilot.covariates[k])?);
        }
    }
    let table =
        |values: Vec<Vec<Option<f64>>>| CovariateTable::new(pilot.covariates.iter().cloned().zip(values).collect());
    Ok((table(proxy)?, table(hist)?))
}

/// Returns the results and, when some target power cannot be reached, the
/// reason (the report is still written).
pub fn design_cmd(
    cfg: &DesignConfig,
    config_path: &Path,
    seed: u64,
    out: &mut OutputDir,
) -> CliResult<(Value, Option<String>)> {
    let (gamma, gamma_report) = match (&cfg.gamma, &cfg.gamma_inputs, &cfg.pilot) {
        (Some(g), _, _) => (*g, json!({ "value": g, "method": "supplied" })),
        (_, Some(inputs), _) => {
            let est = gamma_smd(&inputs.smds, &inputs.binary)
                .map_err(|e| CliError::Config(format!("at /design/gamma_inputs: {e}")))?;
            (est.value, serde_json::to_value(&est)?)
        }
        (_, _, Some(pilot)) => {
            let (proxy, hist) = load_pilot(pilot, config_path)?;
            let plan = CrossFitPlan { seed: derive_seed(seed, 0), ..pilot.crossfit.clone() };
            let est = gamma_pilot(&proxy, &hist, &pilot.propensity, &plan)?;
            (est.value, serde_json::to_value(&est)?)
        }
        _ => unreachable!("validated"),
    };
    let spec = PowerSpec {
        alpha: cfg.alpha,
        tau: cfg.tau,
        kappa_sq: cfg.kappa_sq,
        sigma0_sq: cfg.sigma0_sq,
        rho0: cfg.rho0,
        n1: cfg.n1,
        n0: cfg.n0,
        gamma,
    };
    spec.validate().map_err(|e| CliError::Config(format!("at /design: {e}")))?;

    let taus = cfg.tau_grid.clone().unwrap_or_else(|| (0..=10).map(|k| cfg.tau * k as f64 / 10.0).collect());
    let n1s = cfg.n1_grid.clone().unwrap_or_else(|| vec![cfg.n1]);
    let mut power_rows = Vec::with_capacity(taus.len() * n1s.len());
    for &n1 in &n1s {
        for &tau in &taus {
            let power = aipw_power(&PowerSpec { n1, tau, ..spec.clone() })?;
            power_rows.push(PowerRow { n1, tau, power });
        }
    }
    out.write_csv("power.csv", &power_rows)?;

    let mut size_rows = Vec::with_capacity(cfg.target_power.len());
    let mut infeasible = Vec::new();
    for &target in &cfg.target_power {
        size_rows.push(match solve_n1(&spec, target)? {
            SampleSize::Feasible { n1, power } => SampleSizeRow {
                target_power: target,
                status: "feasible",
                n1: Some(n1),
                power: Some(power),
                max_power: None,
            },
            SampleSize::Infeasible { reason, max_power } => {
                infeasible.push(format!("target power {target}: {reason}"));
                SampleSizeRow {
                    target_power: target,
                    status: "infeasible",
                    n1: None,
                    power: None,
                    max_power: Some(max_power),
                }
            }
        });
    }
    out.write_csv("sample_size.csv", &size_rows)?;
    out.write_csv("ratio_grid.csv", &ratio_grid(&cfg.ratio_gammas, &cfg.ratio_n0_over_n1, cfg.rho0))?;

    let results = json!({
        "gamma": gamma_report,
        "kappa_sq": spec.kappa_sq()?,
        "variance": spec.variance()?,
        "power": aipw_power(&spec)?,
        "rct_ratio": cfg.n0.map(|n0| rct_ratio(cfg.n1, n0, gamma, cfg.rho0)),
        "sample_size": size_rows,
        "feasible": infeasible.is_empty(),
        "infeasibility": infeasible,
    });
    let flag = (!infeasible.is_empty()).then(|| infeasible.join("; "));
    Ok((results, flag))
}

#[derive(Serialize)]
struct McRow {
    method: Method,
    reps: usize,
    oracle_att: f64,
    mean_tau_hat: f64,
    bias: f64,
    mc_se: f64,
    bias_in_mc_se: f64,
    empirical_variance: f64,
    mean_variance: f64,
    mean_formula_variance: f64,
    mean_plugin_variance: f64,
    variance_ratio: f64,
    coverage95: f64,
    rejection_rate: f64,
}

pub fn simulate_cmd(cfg: &SimulateConfig, seed: u64, out: &mut OutputDir) -> CliResult<Value> {
    let start = Instant::now();
    let report = run_mc(&cfg.dgp, &cfg.mc, seed)?;
    log::info!(
        "simulation: {} reps in {:.2?} (seed {seed}, {} failed)",
        cfg.mc.reps,
        start.elapsed(),
        report.failed_reps
    );
    let rows: Vec<McRow> = report
        .results
        .iter()
        .map(|r| McRow {
            method: r.method,
            reps: r.reps,
            oracle_att: r.oracle_att,
            mean_tau_hat: r.mean_tau_hat,
            bias: r.bias,
            mc_se: r.mc_se,
            bias_in_mc_se: r.bias_in_mc_se(),
            empirical_variance: r.empirical_variance,
            mean_variance: r.mean_variance,
            mean_formula_variance: r.mean_formula_variance,
            mean_plugin_variance: r.mean_plugin_variance,
            variance_ratio: r.variance_ratio(),
            coverage95: r.coverage95,
            rejection_rate: r.rejection_rate,
        })
        .collect();
    out.write_csv("mc_results.csv", &rows)?;
    Ok(serde_json::to_value(&report)?)
}

pub fn sweep_cmd(job: &SweepJob, seed: u64, out: &mut OutputDir) -> CliResult<Value> {
    let start = Instant::now();
    let report = sweep_beta(&job.dgp, &job.sweep, seed)?;
    log::info!("sweep: {} beta values in {:.2?} (seed {seed})", job.sweep.beta_grid.len(), start.elapsed());
    out.write_csv("sweep_table.csv", &report.rows)?;
    Ok(serde_json::to_value(&report)?)
}
