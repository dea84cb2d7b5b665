use serde::Serialize;

use crate::data::CovariateTable;
use crate::error::{Error, Result};
use crate::linalg::{Dense, RidgeFit};

pub const DEFAULT_ROUNDS: usize = 5;

/// Ridge penalty used by every per-column imputation model (standardized scale).
pub const IMPUTER_PENALTY: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ColumnStep {
    target: usize,
    predictors: Vec<usize>,
    model: RidgeFit,
}

/// Iterative chained-ridge imputer. Missing cells start at the column mean and
/// are then re-predicted from all other columns, one column at a time, for a
/// fixed number of rounds. Fitting has no random component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImputerState {
    pub rounds: usize,
    pub means: Vec<f64>,
    steps: Vec<Vec<ColumnStep>>,
}

pub fn fit_imputer(table: &CovariateTable) -> Result<ImputerState> {
    fit_imputer_rounds(table, DEFAULT_ROUNDS)
}

pub fn fit_imputer_rounds(table: &CovariateTable, rounds: usize) -> Result<ImputerState> {
    let (n, p) = (table.n_rows(), table.n_cols());
    let mut means = Vec::with_capacity(p);
    for j in 0..p {
        let obs: Vec<f64> = table.column(j).iter().flatten().copied().collect();
        if obs.is_empty() {
            return Err(Error::Validation(format!(
                "column `{}` has no observed values to impute from",
                table.names()[j]
            )));
        }
        means.push(obs.iter().sum::<f64>() / obs.len() as f64);
    }

    let mut current = Dense::zeros(n, p);
    for j in 0..p {
        for i in 0..n {
            current.set(i, j, table.get(i, j).unwrap_or(means[j]));
        }
    }
    let incomplete: Vec<usize> = (0..p).filter(|&j| table.column(j).iter().any(Option::is_none)).collect();
    let mut steps = Vec::with_capacity(rounds);
    if !incomplete.is_empty() && p > 1 {
        for _ in 0..rounds {
            let mut round = Vec::with_capacity(incomplete.len());
            for &target in &incomplete {
                let predictors: Vec<usize> = (0..p).filter(|&j| j != target).collect();
                let observed: Vec<usize> = (0..n).filter(|&i| !table.is_missing(i, target)).collect();
                let x = current.select_rows(&observed).select_cols(&predictors);
                let y: Vec<f64> = observed.iter().map(|&i| current.get(i, target)).collect();
                let model = RidgeFit::fit(&x, &y, IMPUTER_PENALTY)?;
                let mut buf = vec![0.0; predictors.len()];
                for i in (0..n).filter(|&i| table.is_missing(i, target)) {
                    for (k, &j) in predictors.iter().enumerate() {
                        buf[k] = current.get(i, j);
                    }
                    current.set(i, target, model.predict(&buf));
                }
                round.push(ColumnStep { target, predictors, model });
            }
            steps.push(round);
        }
    }
    Ok(ImputerState { rounds, means, steps })
}

impl ImputerState {
    pub fn n_cols(&self) -> usize {
        self.means.len()
    }

    /// Fills the missing cells of one row; observed cells are returned as is.
    pub fn transform_row(&self, row: &[Option<f64>]) -> Vec<f64> {
        debug_assert_eq!(row.len(), self.n_cols());
        let mut out: Vec<f64> = row.iter().zip(&self.means).map(|(v, m)| v.unwrap_or(*m)).collect();
        if row.iter().all(Option::is_some) {
            return out;
        }
        let mut buf = Vec::new();
        for round in &self.steps {
            for step in round {
                if row[step.target].is_some() {
                    continue;
                }
                buf.clear();
                buf.extend(step.predictors.iter().map(|&j| out[j]));
                out[step.target] = step.model.predict(&buf);
            }
        }
        out
    }

    pub fn transform(&self, table: &CovariateTable) -> Result<Dense> {
        if table.n_cols() != self.n_cols() {
            return Err(Error::InvalidInput(format!(
                "imputer fitted on {} columns, got {}",
                self.n_cols(),
                table.n_cols()
            )));
        }
        let mut out = Dense::zeros(table.n_rows(), table.n_cols());
        let mut incomplete = Vec::new();
        for j in 0..table.n_cols() {
            for (i, v) in table.column(j).iter().enumerate() {
                match v {
                    Some(v) => out.set(i, j, *v),
                    None => incomplete.push(i),
                }
            }
        }
        incomplete.sort_unstable();
        incomplete.dedup();
        for i in incomplete {
            for (j, v) in self.transform_row(&table.row(i)).into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        Ok(out)
    }
}
