//! Pluggable regressors for the control outcome model.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{ColumnScaling, Dense, RidgeFit};

/// A fitted regression function on fully observed feature rows.
pub trait Regressor: Debug + Send + Sync {
    fn predict(&self, row: &[f64]) -> f64;
    /// JSON summary for audit output.
    fn describe(&self) -> Value;
}

/// Fits a [`Regressor`] for one value of a scalar hyperparameter.
pub trait Learner: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, x: &Dense, y: &[f64], hyper: f64) -> Result<Arc<dyn Regressor>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    Ridge,
    Knn,
}

impl RegressorKind {
    pub fn learner(self) -> Box<dyn Learner> {
        match self {
            RegressorKind::Ridge => Box::new(RidgeLearner),
            RegressorKind::Knn => Box::new(KnnLearner),
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            RegressorKind::Ridge => (0..9).map(|k| 10f64.powi(k - 4)).collect(),
            RegressorKind::Knn => vec![5.0, 10.0, 20.0, 50.0],
        }
    }
}

/// Ridge on standardized features; `hyper` is the per-row penalty, so the
/// objective is `mean (y - f)^2 + hyper * |b|^2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RidgeLearner;

#[derive(Debug, Clone)]
struct RidgeRegressor {
    fit: RidgeFit,
    lambda: f64,
}

impl Regressor for RidgeRegressor {
    fn predict(&self, row: &[f64]) -> f64 {
        self.fit.predict(row)
    }

    fn describe(&self) -> Value {
        json!({
            "kind": "ridge",
            "lambda": self.lambda,
            "intercept": self.fit.intercept,
            "coefficients_standardized": self.fit.coef,
        })
    }
}

impl Learner for RidgeLearner {
    fn name(&self) -> &'static str {
        "ridge"
    }

    fn fit(&self, x: &Dense, y: &[f64], hyper: f64) -> Result<Arc<dyn Regressor>> {
        if !(hyper >= 0.0) || !hyper.is_finite() {
            return Err(Error::InvalidInput(format!("ridge penalty must be non-negative, got {hyper}")));
        }
        let fit = RidgeFit::fit(x, y, hyper * x.n_rows() as f64)?;
        Ok(Arc::new(RidgeRegressor { fit, lambda: hyper }))
    }
}

/// k-nearest-neighbour mean in standardized Euclidean distance. `hyper` is
/// rounded to the neighbour count and capped at the training size. Equal
/// distances are resolved in favour of the lower training row index.
#[derive(Debug, Clone, Copy, Default)]
pub struct KnnLearner;

#[derive(Debug, Clone)]
struct KnnRegressor {
    k: usize,
    scaling: ColumnScaling,
    x: Dense,
    y: Vec<f64>,
}

impl KnnRegressor {
    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; row.len()];
        self.scaling.apply(row, &mut z);
        z
    }
}

impl Regressor for KnnRegressor {
    fn predict(&self, row: &[f64]) -> f64 {
        let z = self.standardize(row);
        let mut dist: Vec<(f64, usize)> = (0..self.x.n_rows())
            .map(|i| {
                let d = self.x.row(i).iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (d, i)
            })
            .collect();
        let k = self.k.min(dist.len());
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        dist[..k].iter().map(|&(_, i)| self.y[i]).sum::<f64>() / k as f64
    }

    fn describe(&self) -> Value {
        json!({ "kind": "knn", "k": self.k, "n_train": self.y.len() })
    }
}

impl Learner for KnnLearner {
    fn name(&self) -> &'static str {
        "knn"
    }

    fn fit(&self, x: &Dense, y: &[f64], hyper: f64) -> Result<Arc<dyn Regressor>> {
        if !(hyper >= 0.5) || !hyper.is_finite() {
            return Err(Error::InvalidInput(format!("knn needs k >= 1, got {hyper}")));
        }
        if x.n_rows() == 0 {
            return Err(Error::InvalidInput("knn needs training rows".into()));
        }
        let scaling = ColumnScaling::fit(x);
        let mut z = Dense::zeros(x.n_rows(), x.n_cols());
        let mut buf = vec![0.0; x.n_cols()];
        for i in 0..x.n_rows() {
            scaling.apply(x.row(i), &mut buf);
            for (j, v) in buf.iter().enumerate() {
                z.set(i, j, *v);
            }
        }
        let k = (hyper.round() as usize).clamp(1, x.n_rows());
        Ok(Arc::new(KnnRegressor { k, scaling, x: z, y: y.to_vec() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_with_k_equal_n_is_the_mean() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let m = KnnLearner.fit(&Dense::from_rows(&rows), &y, 12.0).unwrap();
        let mean = y.iter().sum::<f64>() / 12.0;
        for probe in [[0.0, 0.0], [100.0, -3.0]] {
            assert!((m.predict(&probe) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_ties_prefer_lowest_index() {
        // rows 0 and 1 are equidistant from the probe; k=1 must pick row 0
        let rows = vec![vec![-1.0], vec![1.0], vec![6.0], vec![-6.0]];
        let m = KnnLearner.fit(&Dense::from_rows(&rows), &[10.0, 20.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(m.predict(&[0.0]), 10.0);
    }

    #[test]
    fn ridge_learner_recovers_line() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 10.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 1.0 - 2.0 * r[0]).collect();
        let m = RidgeLearner.fit(&Dense::from_rows(&rows), &y, 1e-10).unwrap();
        assert!((m.predict(&[2.0]) + 3.0).abs() < 1e-6);
        assert_eq!(m.describe()["kind"], "ridge");
    }

    #[test]
    fn invalid_hyperparameters() {
        let x = Dense::from_rows(&[vec![1.0], vec![2.0]]);
        assert!(KnnLearner.fit(&x, &[1.0, 2.0], 0.0).is_err());
        assert!(RidgeLearner.fit(&x, &[1.0, 2.0], -1.0).is_err());
    }
}
