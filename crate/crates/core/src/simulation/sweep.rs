//! Overlap-resampling sweep: reweight the external pool towards subjects
//! unlike the trial and watch bias and variance respond.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate_with_seed, oracle_att, DgpSpec};
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::nuisance::{fit_propensity, CrossFitPlan};
use crate::pipeline::{fit_nuisances, run_estimators, PipelineSpec};
use crate::stats::{derive_seed, pairwise_sum, rng_for, sample_sd};

/// Pools whose every propensity exceeds this are treated as degenerate.
const SATURATED: f64 = 1.0 - 1e-6;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleConfig {
    #[serde(default = "default_true")]
    pub with_replacement: bool,
    /// Resampled pool size; the original pool size when absent.
    #[serde(default)]
    pub size: Option<usize>,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig { with_replacement: true, size: None }
    }
}

/// Normalized resampling probabilities proportional to `((1 - e) / e)^beta`,
/// computed in log space.
pub fn resample_probabilities(e_hat: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidInput(format!("beta must be non-negative, got {beta}")));
    }
    if e_hat.is_empty() {
        return Err(Error::InvalidInput("empty pool".into()));
    }
    if let Some(e) = e_hat.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(Error::InvalidInput(format!("propensity {e} outside (0, 1)")));
    }
    if e_hat.iter().all(|&e| e > SATURATED) {
        return Err(Error::Positivity("every pool propensity is numerically 1".into()));
    }
    let logw: Vec<f64> = e_hat.iter().map(|&e| beta * ((1.0 - e).ln() - e.ln())).collect();
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total = pairwise_sum(&w);
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Indices into the pool drawn with the overlap-reducing weights.
pub fn beta_resample<R: Rng + ?Sized>(
    e_hat: &[f64],
    beta: f64,
    config: &ResampleConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let p = resample_probabilities(e_hat, beta)?;
    let size = config.size.unwrap_or(p.len());
    if config.with_replacement {
        let dist = WeightedIndex::new(&p).map_err(|e| Error::Numerical(format!("resampling weights: {e}")))?;
        return Ok((0..size).map(|_| dist.sample(rng)).collect());
    }
    let positive = p.iter().filter(|&&v| v > 0.0).count();
    if size > positive {
        return Err(Error::InvalidInput(format!(
            "cannot draw {size} distinct subjects from {positive} with positive weight"
        )));
    }
    // Efraimidis-Spirakis keys u^(1/w), compared through ln(-ln u) - ln w
    let mut keys: Vec<(f64, usize)> = p
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            ((-u.ln()).ln() - w.ln(), i)
        })
        .collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keys.into_iter().take(size).map(|(_, i)| i).collect())
}

fn default_resamples() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub pipeline: PipelineSpec,
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default)]
    pub resample: ResampleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub method: Method,
    pub resamples: usize,
    pub mean_abs_standardized_bias: f64,
    pub mean_variance: f64,
    /// Average of `variance / reference` with the PSM variance at beta = 0 as reference.
    pub mean_variance_ratio: f64,
    pub mean_gamma_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub oracle_att: f64,
    /// Control outcome sd of the unmodified pool, the bias scale.
    pub outcome_sd: f64,
    pub reference_psm_variance: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, beta: f64, method: Method) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.beta == beta && r.method == method)
    }
}

#[derive(Debug, Clone)]
struct Cell {
    beta_index: usize,
    /// Per method: (tau_hat, variance).
    estimates: Vec<(f64, f64)>,
    gamma: f64,
}

/// Runs the sweep. One pooled sample is drawn from `dgp`; the pool propensity
/// used for reweighting is cross-fitted once on it. Each (beta, resample) cell
/// reruns the whole pipeline on trial + resampled pool, with variances from
/// the closed-form expressions.
pub fn sweep_beta(dgp: &DgpSpec, config: &SweepConfig, seed: u64) -> Result<SweepReport> {
    let grid = &config.beta_grid;
    if grid.is_empty() {
        return Err(Error::InvalidInput("beta grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("beta grid must be strictly ascending".into()));
    }
    if grid.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
        return Err(Error::InvalidInput("beta values must be finite and non-negative".into()));
    }
    if config.resamples == 0 {
        return Err(Error::InvalidInput("at least one resample per beta is required".into()));
    }
    let mut pipeline = config.pipeline.clone();
    if !pipeline.methods.contains(&Method::Psm) {
        pipeline.methods.push(Method::Psm);
    }
    pipeline.validate()?;
    let psm_slot = pipeline.methods.iter().position(|&m| m == Method::Psm).unwrap_or_default();

    let base = generate_with_seed(dgp, derive_seed(seed, 0))?;
    let oracle = oracle_att(dgp, 200_000)?;
    let sample = &base.sample;
    let plan = CrossFitPlan { seed: derive_seed(seed, 1), ..pipeline.crossfit.clone() };
    let e_all = fit_propensity(sample, &plan, &pipeline.propensity)?.oof;
    let treated = sample.treated_indices();
    let pool = sample.control_indices();
    let pool_e: Vec<f64> = pool.iter().map(|&i| e_all[i]).collect();
    let pool_y: Vec<f64> = pool.iter().map(|&i| sample.outcome()[i]).collect();
    let outcome_sd = sample_sd(&pool_y);
    if !(outcome_sd > 0.0) {
        return Err(Error::DegenerateCohort("control outcomes have zero spread".into()));
    }

    // beta = 0 is always evaluated so the variance reference exists
    let mut betas = grid.clone();
    if betas[0] != 0.0 {
        betas.insert(0, 0.0);
    }
    let jobs: Vec<(usize, usize)> = (0..betas.len()).flat_map(|b| (0..config.resamples).map(move |r| (b, r))).collect();
    let cells: Vec<Cell> = jobs
        .into_par_iter()
        .map(|(b, r)| -> Result<Cell> {
            let stream = (b * config.resamples + r) as u64;
            let mut rng = rng_for(derive_seed(seed, 2), stream);
            let picks = beta_resample(&pool_e, betas[b], &config.resample, &mut rng)?;
            let rows: Vec<usize> = treated.iter().copied().chain(picks.into_iter().map(|k| pool[k])).collect();
            let (view, groups) = sample.resample(&rows)?;
            let nuis = fit_nuisances(&view, Some(&groups), &pipeline, derive_seed(derive_seed(seed, 3), stream))?;
            let report = run_estimators(&view, &nuis, &pipeline)?;
            let estimates = report
                .estimates
                .iter()
                .map(|e| {
                    let formula = e.diagnostics.get("formula_variance").and_then(|v| v.as_f64());
                    (e.tau_hat, formula.unwrap_or(e.variance))
                })
                .collect();
            Ok(Cell { beta_index: b, estimates, gamma: report.components.gamma.unwrap_or(f64::NAN) })
        })
        .collect::<Result<_>>()?;

    let mean = |xs: Vec<f64>| pairwise_sum(&xs) / xs.len() as f64;
    let reference = mean(cells.iter().filter(|c| c.beta_index == 0).map(|c| c.estimates[psm_slot].1).collect());
    if !(reference > 0.0) {
        return Err(Error::Numerical("reference PSM variance is not positive".into()));
    }
    let first = usize::from(betas.len() != grid.len());
    let mut rows = Vec::new();
    for (b, &beta) in betas.iter().enumerate().skip(first) {
        let at: Vec<&Cell> = cells.iter().filter(|c| c.beta_index == b).collect();
        let gamma = mean(at.iter().map(|c| c.gamma).collect());
        for (k, &method) in pipeline.methods.iter().enumerate() {
            rows.push(SweepRow {
                beta,
                method,
                resamples: at.len(),
                mean_abs_standardized_bias: mean(
                    at.iter().map(|c| (c.estimates[k].0 - oracle).abs() / outcome_sd).collect(),
                ),
                mean_variance: mean(at.iter().map(|c| c.estimates[k].1).collect()),
                mean_variance_ratio: mean(at.iter().map(|c| c.estimates[k].1 / reference).collect()),
                mean_gamma_hat: gamma,
            });
        }
    }
    Ok(SweepReport { oracle_att: oracle, outcome_sd, reference_psm_variance: reference, rows })
}
