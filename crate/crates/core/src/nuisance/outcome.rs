use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::crossfit::{assign_folds, split, CrossFitPlan};
use super::imputer::{fit_imputer_rounds, ImputerState, DEFAULT_ROUNDS};
use super::regressor::{Learner, Regressor, RegressorKind};
use crate::data::{CovariateTable, PooledSample, VelocityRow};
use crate::error::{Error, Result};
use crate::stats::{mean, pearson};

/// What the outcome regressor is trained to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutcomeTarget {
    /// Regress the outcome itself on the covariates.
    #[default]
    Level,
    /// Regress `(Y - baseline) / elapsed` and predict `baseline + v * elapsed`.
    /// Both columns are read from the covariate table; `elapsed` is not used
    /// as a feature.
    Velocity { baseline: String, elapsed: String },
}

fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeConfig {
    pub kind: RegressorKind,
    /// Hyperparameter grid; the kind's default grid when absent.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub target: OutcomeTarget,
    #[serde(default = "default_rounds")]
    pub imputer_rounds: usize,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        Self { kind: RegressorKind::Ridge, grid: None, target: OutcomeTarget::Level, imputer_rounds: DEFAULT_ROUNDS }
    }
}

impl OutcomeConfig {
    pub fn grid(&self) -> Vec<f64> {
        self.grid.clone().unwrap_or_else(|| self.kind.default_grid())
    }
}

/// Control rows prepared for regression. `groups` ties repeated rows of one
/// subject together so they share a fold.
#[derive(Debug, Clone)]
pub struct OutcomeTrainingSet {
    pub covariates: CovariateTable,
    pub groups: Vec<String>,
    pub target: Vec<f64>,
}

impl OutcomeTrainingSet {
    pub fn new(covariates: CovariateTable, groups: Vec<String>, target: Vec<f64>) -> Result<Self> {
        if groups.len() != covariates.n_rows() || target.len() != covariates.n_rows() {
            return Err(Error::InvalidInput("outcome training set is misaligned".into()));
        }
        if let Some(i) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite training target for subject `{}`", groups[i])));
        }
        Ok(Self { covariates, groups, target })
    }

    /// One row per velocity observation; features come from `table`.
    pub fn from_velocities(rows: &[VelocityRow], table: &CovariateTable) -> Result<Self> {
        let idx: Vec<usize> = rows.iter().map(|r| r.covariate_row).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= table.n_rows()) {
            return Err(Error::InvalidInput(format!("covariate row {bad} out of range")));
        }
        Self::new(
            table.select_rows(&idx),
            rows.iter().map(|r| r.subject_id.clone()).collect(),
            rows.iter().map(|r| r.velocity).collect(),
        )
    }
}

#[derive(Debug, Clone)]
struct FoldModel {
    imputer: ImputerState,
    regressor: Arc<dyn Regressor>,
    hyper: f64,
}

impl FoldModel {
    fn predict(&self, row: &[Option<f64>]) -> f64 {
        self.regressor.predict(&self.imputer.transform_row(row))
    }
}

/// Outer-fold regressors plus the fold each training subject was held out of.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub learner: &'static str,
    pub feature_names: Vec<String>,
    folds: Vec<FoldModel>,
    subject_fold: HashMap<String, usize>,
}

impl OutcomeModel {
    /// Prediction for one feature row. A subject seen in training is scored
    /// by the model of the fold that excluded it; anyone else gets the average
    /// over all fold models.
    pub fn predict(&self, subject: Option<&str>, row: &[Option<f64>]) -> f64 {
        if let Some(&k) = subject.and_then(|s| self.subject_fold.get(s)) {
            return self.folds[k].predict(row);
        }
        self.folds.iter().map(|m| m.predict(row)).sum::<f64>() / self.folds.len() as f64
    }

    pub fn predict_fresh(&self, table: &CovariateTable) -> Result<Vec<f64>> {
        let table = table.select_columns(&self.feature_names)?;
        Ok((0..table.n_rows()).map(|i| self.predict(None, &table.row(i))).collect())
    }

    pub fn fold_hypers(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.hyper).collect()
    }

    pub fn summary(&self) -> Value {
        json!({
            "learner": self.learner,
            "features": self.feature_names,
            "fold_hyperparameters": self.fold_hypers(),
            "fold_models": self.folds.iter().map(|f| f.regressor.describe()).collect::<Vec<_>>(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct OutcomeFit {
    pub model: OutcomeModel,
    /// Out-of-fold prediction of the training target for every training row.
    pub oof: Vec<f64>,
    pub folds: Vec<usize>,
}

fn fit_fold(
    table: &CovariateTable,
    target: &[f64],
    learner: &dyn Learner,
    hyper: f64,
    rounds: usize,
) -> Result<FoldModel> {
    let imputer = fit_imputer_rounds(table, rounds)?;
    let x = imputer.transform(table)?;
    let regressor = learner.fit(&x, target, hyper)?;
    Ok(FoldModel { imputer, regressor, hyper })
}

fn select_hyper(
    table: &CovariateTable,
    target: &[f64],
    groups: &[String],
    learner: &dyn Learner,
    grid: &[f64],
    plan: &CrossFitPlan,
    rounds: usize,
    stream: u64,
) -> Result<f64> {
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let folds = assign_folds(groups, None, plan.inner_folds, plan.seed, stream);
    let mut sse = vec![0.0; grid.len()];
    for k in 0..plan.inner_folds {
        let (train, test) = split(&folds, k);
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let t_train = table.select_rows(&train);
        let y_train: Vec<f64> = train.iter().map(|&i| target[i]).collect();
        for (g, &h) in grid.iter().enumerate() {
            let m = fit_fold(&t_train, &y_train, learner, h, rounds)?;
            sse[g] += test.iter().map(|&i| (m.predict(&table.row(i)) - target[i]).powi(2)).sum::<f64>();
        }
    }
    let best = (0..grid.len()).fold(0, |b, g| if sse[g] < sse[b] { g } else { b });
    Ok(grid[best])
}

/// Cross-fitted outcome regression with grouped nested CV on squared error.
pub fn fit_outcome(
    train: &OutcomeTrainingSet,
    plan: &CrossFitPlan,
    learner: &dyn Learner,
    grid: &[f64],
    imputer_rounds: usize,
) -> Result<OutcomeFit> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("outcome hyperparameter grid is empty".into()));
    }
    let subjects: HashSet<&str> = train.groups.iter().map(String::as_str).collect();
    if subjects.len() < plan.outer_folds {
        return Err(Error::InvalidInput(format!(
            "outcome model needs at least {} control subjects, got {}",
            plan.outer_folds,
            subjects.len()
        )));
    }
    let table = &train.covariates;
    let folds = assign_folds(&train.groups, None, plan.outer_folds, plan.seed, 1);
    let fitted: Vec<Result<FoldModel>> = (0..plan.outer_folds)
        .into_par_iter()
        .map(|k| {
            let (tr, _) = split(&folds, k);
            let t_train = table.select_rows(&tr);
            let y_train: Vec<f64> = tr.iter().map(|&i| train.target[i]).collect();
            let g_train: Vec<String> = tr.iter().map(|&i| train.groups[i].clone()).collect();
            let h = select_hyper(&t_train, &y_train, &g_train, learner, grid, plan, imputer_rounds, 200 + k as u64)?;
            fit_fold(&t_train, &y_train, learner, h, imputer_rounds)
        })
        .collect();
    let fold_models = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    let oof = (0..table.n_rows()).map(|i| fold_models[folds[i]].predict(&table.row(i))).collect();
    let subject_fold = train.groups.iter().cloned().zip(folds.iter().copied()).collect();
    let model = OutcomeModel {
        learner: learner.name(),
        feature_names: table.names().to_vec(),
        folds: fold_models,
        subject_fold,
    };
    Ok(OutcomeFit { model, oof, folds })
}

/// Pearson correlation of predictions with observed control outcomes,
/// clamped to `[-1, 1]`. Constant predictions give 0 plus a warning.
pub fn estimate_rho0(predictions: &[f64], observed: &[f64]) -> Result<(f64, Option<String>)> {
    if predictions.len() != observed.len() || predictions.len() < 3 {
        return Err(Error::InvalidInput("rho0 needs at least 3 aligned control rows".into()));
    }
    match pearson(predictions, observed) {
        Some(r) => Ok((r, None)),
        None => {
            let msg = "outcome predictions or control outcomes have zero variance; rho0 set to 0".to_string();
            log::warn!("{msg}");
            Ok((0.0, Some(msg)))
        }
    }
}

/// Counterfactual control means for every row of a pooled sample.
#[derive(Debug, Clone)]
pub struct PooledOutcome {
    pub fit: OutcomeFit,
    /// Out-of-fold for controls, fold-averaged for treated.
    pub mu0: Vec<f64>,
    pub rho0: f64,
    /// Mean squared out-of-fold residual over controls.
    pub control_residual_variance: f64,
    pub warnings: Vec<String>,
}

impl PooledOutcome {
    pub fn summary(&self) -> Value {
        json!({
            "model": self.fit.model.summary(),
            "rho0": self.rho0,
            "control_residual_variance": self.control_residual_variance,
            "warnings": self.warnings,
        })
    }
}

/// Fits the control outcome model on the pooled sample's control arm.
/// `groups` defaults to subject ids and keeps bootstrap copies in one fold.
pub fn fit_pooled_outcome(
    sample: &PooledSample,
    groups: Option<&[String]>,
    plan: &CrossFitPlan,
    config: &OutcomeConfig,
) -> Result<PooledOutcome> {
    let groups = groups.unwrap_or(sample.subject_ids());
    let controls = sample.control_indices();
    let cov = sample.covariates();
    let y = sample.outcome();

    let (features, baseline, elapsed) = match &config.target {
        OutcomeTarget::Level => (cov.clone(), None, None),
        OutcomeTarget::Velocity { baseline, elapsed } => {
            let col = |name: &str| -> Result<Vec<f64>> {
                let values = cov
                    .column_by_name(name)
                    .ok_or_else(|| Error::Validation(format!("velocity column `{name}` not in covariates")))?;
                values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v.filter(|x| x.is_finite()).ok_or_else(|| {
                            Error::Validation(format!(
                                "column `{name}` missing for subject `{}`",
                                sample.subject_ids()[i]
                            ))
                        })
                    })
                    .collect()
            };
            let b = col(baseline)?;
            let e = col(elapsed)?;
            if let Some(i) = e.iter().position(|&t| t <= 0.0) {
                return Err(Error::Validation(format!(
                    "elapsed time must be positive (subject `{}`)",
                    sample.subject_ids()[i]
                )));
            }
            let keep: Vec<String> = cov.names().iter().filter(|n| *n != elapsed).cloned().collect();
            (cov.select_columns(&keep)?, Some(b), Some(e))
        }
    };
    let to_target = |i: usize| match (&baseline, &elapsed) {
        (Some(b), Some(e)) => (y[i] - b[i]) / e[i],
        _ => y[i],
    };
    let from_target = |i: usize, v: f64| match (&baseline, &elapsed) {
        (Some(b), Some(e)) => b[i] + v * e[i],
        _ => v,
    };

    let train = OutcomeTrainingSet::new(
        features.select_rows(&controls),
        controls.iter().map(|&i| groups[i].clone()).collect(),
        controls.iter().map(|&i| to_target(i)).collect(),
    )?;
    let learner = config.kind.learner();
    let fit = fit_outcome(&train, plan, learner.as_ref(), &config.grid(), config.imputer_rounds)?;

    let mut mu0 = vec![f64::NAN; sample.n()];
    for (k, &i) in controls.iter().enumerate() {
        mu0[i] = from_target(i, fit.oof[k]);
    }
    for i in sample.treated_indices() {
        mu0[i] = from_target(i, fit.model.predict(None, &features.row(i)));
    }
    let mu_c: Vec<f64> = controls.iter().map(|&i| mu0[i]).collect();
    let y_c: Vec<f64> = controls.iter().map(|&i| y[i]).collect();
    let (rho0, warn) = estimate_rho0(&mu_c, &y_c)?;
    let resid: Vec<f64> = mu_c.iter().zip(&y_c).map(|(m, y)| y - m).collect();
    let control_residual_variance = mean(&resid.iter().map(|r| r * r).collect::<Vec<_>>());
    Ok(PooledOutcome { fit, mu0, rho0, control_residual_variance, warnings: warn.into_iter().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::regressor::{KnnLearner, RidgeLearner};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn linear_training(n: usize, noise: f64, seed: u64) -> OutcomeTrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coef = [0.5, -1.0, 0.25];
        let mut cols = vec![Vec::with_capacity(n); 3];
        let mut target = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let e: f64 = rng.sample(StandardNormal);
            target.push(x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + noise * e);
            for j in 0..3 {
                cols[j].push(Some(x[j]));
            }
        }
        let table =
            CovariateTable::new(cols.into_iter().enumerate().map(|(j, c)| (format!("x{j}"), c)).collect()).unwrap();
        OutcomeTrainingSet::new(table, (0..n).map(|i| format!("s{i}")).collect(), target).unwrap()
    }

    #[test]
    fn ridge_oof_error_close_to_noise_variance() {
        let noise = 0.7;
        let train = linear_training(2000, noise, 17);
        let grid = RegressorKind::Ridge.default_grid();
        let fit = fit_outcome(&train, &CrossFitPlan::with_seed(2), &RidgeLearner, &grid, 5).unwrap();
        let mse = fit.oof.iter().zip(&train.target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / 2000.0;
        assert!((mse / (noise * noise) - 1.0).abs() < 0.1, "mse {mse}");
    }

    #[test]
    fn oof_rows_are_scored_by_the_fold_that_excluded_them() {
        let train = linear_training(100, 1.0, 3);
        let fit = fit_outcome(&train, &CrossFitPlan::with_seed(8), &RidgeLearner, &[0.1, 1.0], 5).unwrap();
        for i in 0..100 {
            let row = train.covariates.row(i);
            assert_eq!(fit.model.predict(Some(&train.groups[i]), &row), fit.oof[i]);
        }
    }

    #[test]
    fn knn_with_all_neighbours_is_constant() {
        let train = linear_training(60, 1.0, 5);
        // every outer training fold has 48 rows; k rounds down to that cap
        let fit = fit_outcome(&train, &CrossFitPlan::with_seed(1), &KnnLearner, &[1000.0], 5).unwrap();
        for i in 0..60 {
            let k = fit.folds[i];
            let expected = mean(&(0..60).filter(|&j| fit.folds[j] != k).map(|j| train.target[j]).collect::<Vec<_>>());
            assert!((fit.oof[i] - expected).abs() < 1e-12);
        }
    }

    fn velocity_sample(slope: f64) -> PooledSample {
        let n = 40;
        let x: Vec<Option<f64>> = (0..n).map(|i| Some((i as f64 * 0.37).sin())).collect();
        let base: Vec<Option<f64>> = (0..n).map(|i| Some(30.0 + (i % 7) as f64)).collect();
        let dt: Vec<Option<f64>> = (0..n).map(|i| Some(200.0 + 10.0 * (i % 5) as f64)).collect();
        let y: Vec<f64> = (0..n).map(|i| base[i].unwrap() + slope * x[i].unwrap() * dt[i].unwrap()).collect();
        let table = CovariateTable::new(vec![("x".into(), x), ("y0".into(), base), ("dt".into(), dt)]).unwrap();
        let treated = (0..n).map(|i| i % 4 == 0).collect();
        PooledSample::new(table, treated, y, (0..n).map(|i| format!("p{i}")).collect()).unwrap()
    }

    #[test]
    fn zero_velocity_predicts_the_baseline() {
        let s = velocity_sample(0.0);
        let config = OutcomeConfig {
            target: OutcomeTarget::Velocity { baseline: "y0".into(), elapsed: "dt".into() },
            ..Default::default()
        };
        let out = fit_pooled_outcome(&s, None, &CrossFitPlan::with_seed(4), &config).unwrap();
        let base = s.covariates().column_by_name("y0").unwrap();
        for (m, b) in out.mu0.iter().zip(base) {
            assert!((m - b.unwrap()).abs() < 1e-12);
        }
        assert!(!out.fit.model.feature_names.contains(&"dt".to_string()));
    }

    #[test]
    fn velocity_model_extrapolates_along_elapsed_time() {
        let s = velocity_sample(-0.01);
        let config = OutcomeConfig {
            grid: Some(vec![1e-8]),
            target: OutcomeTarget::Velocity { baseline: "y0".into(), elapsed: "dt".into() },
            ..Default::default()
        };
        let out = fit_pooled_outcome(&s, None, &CrossFitPlan::with_seed(4), &config).unwrap();
        for (m, y) in out.mu0.iter().zip(s.outcome()) {
            assert!((m - y).abs() < 1e-4, "{m} vs {y}");
        }
        assert!(out.rho0 > 0.999);
    }

    #[test]
    fn rho0_edge_cases() {
        let y = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(estimate_rho0(&[2.0; 4], &y).unwrap(), (0.0, estimate_rho0(&[2.0; 4], &y).unwrap().1));
        assert!(estimate_rho0(&[2.0; 4], &y).unwrap().1.is_some());
        assert!((estimate_rho0(&y, &y).unwrap().0 - 1.0).abs() < 1e-12);
        let affine: Vec<f64> = y.iter().map(|v| 3.0 * v - 2.0).collect();
        assert!((estimate_rho0(&affine, &y).unwrap().0 - 1.0).abs() < 1e-12);
        assert!(estimate_rho0(&y[..2], &y[..2]).is_err());
    }

    #[test]
    fn precondition_errors() {
        let train = linear_training(4, 1.0, 1);
        assert!(fit_outcome(&train, &CrossFitPlan::default(), &RidgeLearner, &[1.0], 5).is_err());
        let train = linear_training(20, 1.0, 1);
        assert!(fit_outcome(&train, &CrossFitPlan::default(), &RidgeLearner, &[], 5).is_err());
    }
}
