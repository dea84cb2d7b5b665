//! Nuisance functions: propensity e(X) and control outcome mean mu0(X), each
//! cross-fitted so that no row is scored by a model trained on its subject.

mod crossfit;
mod imputer;
mod logistic;
mod outcome;
mod propensity;
mod regressor;

pub use crossfit::{assign_folds, CrossFitPlan};
pub use imputer::{fit_imputer, fit_imputer_rounds, ImputerState, DEFAULT_ROUNDS, IMPUTER_PENALTY};
pub use logistic::{fit_logistic, fit_logistic_from, gradient, is_separated, objective, IrlsOptions, LogisticFit};
pub use outcome::{
    estimate_rho0, fit_outcome, fit_pooled_outcome, OutcomeConfig, OutcomeFit, OutcomeModel, OutcomeTarget,
    OutcomeTrainingSet, PooledOutcome,
};
pub use propensity::{
    default_lambda_grid, fit_propensity, fit_propensity_grouped, PropensityConfig, PropensityFit, PropensityModel,
    DEFAULT_CLIP,
};
pub use regressor::{KnnLearner, Learner, Regressor, RegressorKind, RidgeLearner};
