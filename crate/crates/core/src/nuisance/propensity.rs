use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::crossfit::{assign_folds, split, CrossFitPlan};
use super::imputer::{fit_imputer_rounds, ImputerState, DEFAULT_ROUNDS};
use super::logistic::{fit_logistic_from, is_separated, IrlsOptions, LogisticFit};
use crate::data::{CovariateTable, PooledSample};
use crate::error::{Error, Result};
use crate::linalg::{ColumnScaling, Dense};
use crate::stats::sigmoid;

pub const DEFAULT_CLIP: f64 = 1e-6;

/// Nine points, log-spaced over `[1e-4, 1e4]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powi(k - 4)).collect()
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropensityConfig {
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_rounds")]
    pub imputer_rounds: usize,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self { lambda_grid: default_lambda_grid(), clip: DEFAULT_CLIP, imputer_rounds: DEFAULT_ROUNDS }
    }
}

/// Imputer, standardizer and logistic coefficients mapping covariates to e(X).
#[derive(Debug, Clone, Serialize)]
pub struct PropensityModel {
    pub feature_names: Vec<String>,
    pub dropped_features: Vec<String>,
    #[serde(skip)]
    imputer: ImputerState,
    scaling: ColumnScaling,
    kept: Vec<usize>,
    pub fit: LogisticFit,
    pub clip: f64,
}

impl PropensityModel {
    fn design(&self, table: &CovariateTable) -> Result<Dense> {
        let table = table.select_columns(&self.feature_names)?;
        let raw = self.imputer.transform(&table)?;
        Ok(standardize(&raw, &self.scaling, &self.kept))
    }

    /// Clipped probabilities in `[clip, 1 - clip]`.
    pub fn predict(&self, table: &CovariateTable) -> Result<Vec<f64>> {
        let x = self.design(table)?;
        Ok((0..x.n_rows())
            .map(|i| sigmoid(self.fit.linear_predictor(x.row(i))).clamp(self.clip, 1.0 - self.clip))
            .collect())
    }
}

fn standardize(raw: &Dense, scaling: &ColumnScaling, kept: &[usize]) -> Dense {
    let mut out = Dense::zeros(raw.n_rows(), kept.len());
    for i in 0..raw.n_rows() {
        let row = raw.row(i);
        for (k, &j) in kept.iter().enumerate() {
            out.set(i, k, (row[j] - scaling.center[j]) / scaling.scale[j]);
        }
    }
    out
}

/// Imputed and standardized training design, shared by every penalty fitted
/// on the same rows.
struct Prepared {
    imputer: ImputerState,
    scaling: ColumnScaling,
    kept: Vec<usize>,
    dropped: Vec<String>,
    x: Dense,
}

impl Prepared {
    fn new(table: &CovariateTable, config: &PropensityConfig) -> Result<Self> {
        let imputer = fit_imputer_rounds(table, config.imputer_rounds)?;
        let raw = imputer.transform(table)?;
        let scaling = ColumnScaling::fit(&raw);
        let kept: Vec<usize> = (0..raw.n_cols()).filter(|&j| !scaling.constant[j]).collect();
        let dropped = (0..raw.n_cols()).filter(|&j| scaling.constant[j]).map(|j| table.names()[j].clone()).collect();
        let x = standardize(&raw, &scaling, &kept);
        Ok(Self { imputer, scaling, kept, dropped, x })
    }

    fn design(&self, table: &CovariateTable) -> Result<Dense> {
        Ok(standardize(&self.imputer.transform(table)?, &self.scaling, &self.kept))
    }

    fn fit(
        &self,
        labels: &[bool],
        lambda: f64,
        fallback_lambda: f64,
        init: Option<&[f64]>,
        warnings: &mut Vec<String>,
    ) -> Result<LogisticFit> {
        let opts = IrlsOptions::default();
        let mut fit = fit_logistic_from(&self.x, labels, lambda, opts, init)?;
        if is_separated(&self.x, labels, &fit) && lambda < fallback_lambda {
            let msg = format!("perfect separation at lambda={lambda}; refitting with lambda={fallback_lambda}");
            log::warn!("{msg}");
            warnings.push(msg);
            fit = fit_logistic_from(&self.x, labels, fallback_lambda, opts, None)?;
        }
        if !fit.converged {
            let msg = format!(
                "IRLS stopped after {} iterations with gradient sup-norm {:.3e}",
                fit.iterations, fit.grad_sup_norm
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Ok(fit)
    }
}

fn fit_model(
    table: &CovariateTable,
    labels: &[bool],
    lambda: f64,
    fallback_lambda: f64,
    config: &PropensityConfig,
    warnings: &mut Vec<String>,
) -> Result<PropensityModel> {
    let prep = Prepared::new(table, config)?;
    for name in &prep.dropped {
        let msg = format!("constant covariate `{name}` dropped from propensity model");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let fit = prep.fit(labels, lambda, fallback_lambda, None, warnings)?;
    Ok(PropensityModel {
        feature_names: table.names().to_vec(),
        dropped_features: prep.dropped,
        imputer: prep.imputer,
        scaling: prep.scaling,
        kept: prep.kept,
        fit,
        clip: config.clip,
    })
}

fn held_out_loglik(probs: &[f64], labels: &[bool]) -> f64 {
    probs.iter().zip(labels).map(|(&p, &a)| if a { p.ln() } else { (1.0 - p).ln() }).sum()
}

/// Picks the grid value maximizing K-fold held-out log-likelihood. Within a
/// fold the grid is walked from the strongest penalty down, each fit starting
/// from the previous solution.
fn select_lambda(
    table: &CovariateTable,
    labels: &[bool],
    groups: &[String],
    folds_k: usize,
    config: &PropensityConfig,
    seed: u64,
    stream: u64,
) -> Result<f64> {
    let grid = &config.lambda_grid;
    let fallback = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let folds = assign_folds(groups, Some(labels), folds_k, seed, stream);
    let mut scores = vec![0.0; grid.len()];
    for k in 0..folds_k {
        let (train, test) = split(&folds, k);
        if test.is_empty() {
            continue;
        }
        let prep = Prepared::new(&table.select_rows(&train), config)?;
        let l_train: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let x_test = prep.design(&table.select_rows(&test))?;
        let l_test: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        let mut warm: Option<Vec<f64>> = None;
        for &g in &order {
            let mut sink = Vec::new();
            let fit = prep.fit(&l_train, grid[g], fallback, warm.as_deref(), &mut sink)?;
            let probs: Vec<f64> = (0..x_test.n_rows())
                .map(|i| sigmoid(fit.linear_predictor(x_test.row(i))).clamp(config.clip, 1.0 - config.clip))
                .collect();
            scores[g] += held_out_loglik(&probs, &l_test);
            warm = Some(fit.theta());
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if scores[g] > scores[best] {
            best = g;
        }
    }
    Ok(grid[best])
}

/// Cross-fitted propensity scores plus a full-data model for fresh rows.
#[derive(Debug, Clone, Serialize)]
pub struct PropensityFit {
    pub model: PropensityModel,
    /// Out-of-fold e(X) for every input row.
    pub oof: Vec<f64>,
    pub folds: Vec<usize>,
    pub fold_lambdas: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn fit_propensity(sample: &PooledSample, plan: &CrossFitPlan, config: &PropensityConfig) -> Result<PropensityFit> {
    fit_propensity_grouped(sample.covariates(), sample.treated(), sample.subject_ids(), plan, config)
}

/// As [`fit_propensity`], with explicit fold groups (rows sharing a group label
/// always land in the same fold).
pub fn fit_propensity_grouped(
    covariates: &CovariateTable,
    treated: &[bool],
    groups: &[String],
    plan: &CrossFitPlan,
    config: &PropensityConfig,
) -> Result<PropensityFit> {
    if config.lambda_grid.is_empty() {
        return Err(Error::InvalidInput("lambda grid is empty".into()));
    }
    if config.lambda_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidInput("lambda grid values must be positive and finite".into()));
    }
    if plan.outer_folds < 2 || plan.inner_folds < 2 {
        return Err(Error::InvalidInput("cross-fitting needs at least 2 outer and 2 inner folds".into()));
    }
    let n1 = treated.iter().filter(|&&a| a).count();
    let n0 = treated.len() - n1;
    if n1 < plan.outer_folds || n0 < plan.outer_folds {
        return Err(Error::InvalidInput(format!(
            "each arm needs at least {} subjects for cross-fitting (n1={n1}, n0={n0})",
            plan.outer_folds
        )));
    }
    let fallback = config.lambda_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let folds = assign_folds(groups, Some(treated), plan.outer_folds, plan.seed, 0);

    let per_fold: Vec<Result<(Vec<usize>, Vec<f64>, f64, Vec<String>)>> = (0..plan.outer_folds)
        .into_par_iter()
        .map(|k| {
            let (train, test) = split(&folds, k);
            let t_train = covariates.select_rows(&train);
            let l_train: Vec<bool> = train.iter().map(|&i| treated[i]).collect();
            let g_train: Vec<String> = train.iter().map(|&i| groups[i].clone()).collect();
            let lambda =
                select_lambda(&t_train, &l_train, &g_train, plan.inner_folds, config, plan.seed, 100 + k as u64)?;
            let mut warnings = Vec::new();
            let model = fit_model(&t_train, &l_train, lambda, fallback, config, &mut warnings)?;
            let preds = model.predict(&covariates.select_rows(&test))?;
            Ok((test, preds, lambda, warnings))
        })
        .collect();

    let mut oof = vec![f64::NAN; treated.len()];
    let mut fold_lambdas = Vec::with_capacity(plan.outer_folds);
    let mut warnings = Vec::new();
    for r in per_fold {
        let (test, preds, lambda, w) = r?;
        for (i, p) in test.into_iter().zip(preds) {
            oof[i] = p;
        }
        fold_lambdas.push(lambda);
        warnings.extend(w);
    }

    let lambda = select_lambda(covariates, treated, groups, plan.inner_folds, config, plan.seed, 99)?;
    let model = fit_model(covariates, treated, lambda, fallback, config, &mut warnings)?;
    Ok(PropensityFit { model, oof, folds, fold_lambdas, warnings })
}
