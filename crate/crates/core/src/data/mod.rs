//! Cohort representation: covariate tables with explicit missingness, pooled
//! trial + external-control samples, eligibility filtering and longitudinal
//! velocity construction.

mod csv_io;
mod eligibility;
mod longitudinal;

pub use csv_io::{load_pooled, read_pooled, write_pooled, Schema};
pub use eligibility::{apply_eligibility, EligibilityFilter, EligibilityReport, EligibilityRule};
pub use longitudinal::{compute_velocities, EvaluationRow, LongitudinalRecord, VelocityRow, VelocityTable, Visit};

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Baseline covariates, column-major, with missing cells as `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    names: Vec<String>,
    columns: Vec<Vec<Option<f64>>>,
    n_rows: usize,
}

impl CovariateTable {
    pub fn new(columns: Vec<(String, Vec<Option<f64>>)>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Validation("covariate table has no columns".into()));
        }
        let n_rows = columns[0].1.len();
        if n_rows == 0 {
            return Err(Error::Validation("covariate table has no rows".into()));
        }
        let mut seen = HashSet::new();
        for (name, values) in &columns {
            if name.trim().is_empty() {
                return Err(Error::Validation("empty covariate column name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate covariate column `{name}`")));
            }
            if values.len() != n_rows {
                return Err(Error::Validation(format!(
                    "column `{name}` has {} entries, expected {n_rows}",
                    values.len()
                )));
            }
            if values.iter().all(Option::is_none) {
                return Err(Error::Validation(format!("column `{name}` is entirely missing")));
            }
            if values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("column `{name}` has non-finite values")));
            }
        }
        let (names, columns) = columns.into_iter().unzip();
        Ok(Self { names, columns, n_rows })
    }

    /// Builds a fully observed table from row-major data.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = names
            .into_iter()
            .enumerate()
            .map(|(j, name)| {
                let values = rows.iter().map(|r| Some(r[j])).collect();
                (name, values)
            })
            .collect();
        Self::new(cols)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, j: usize) -> &[Option<f64>] {
        &self.columns[j]
    }

    pub fn column_by_name(&self, name: &str) -> Option<&[Option<f64>]> {
        self.index_of(name).map(|j| self.column(j))
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.columns[col][row]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.columns[col][row].is_none()
    }

    pub fn missing_count(&self) -> usize {
        self.columns.iter().flatten().filter(|v| v.is_none()).count()
    }

    pub fn row(&self, r: usize) -> Vec<Option<f64>> {
        self.columns.iter().map(|c| c[r]).collect()
    }

    /// Subset of rows (repeats allowed). Entirely-missing columns are not
    /// re-checked here; downstream fits report them.
    pub fn select_rows(&self, rows: &[usize]) -> CovariateTable {
        let columns = self.columns.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect();
        CovariateTable { names: self.names.clone(), columns, n_rows: rows.len() }
    }

    pub fn select_columns(&self, names: &[String]) -> Result<CovariateTable> {
        let mut cols = Vec::with_capacity(names.len());
        for name in names {
            let j = self.index_of(name).ok_or_else(|| Error::Validation(format!("unknown covariate `{name}`")))?;
            cols.push(self.columns[j].clone());
        }
        Ok(CovariateTable { names: names.to_vec(), columns: cols, n_rows: self.n_rows })
    }

    /// Stacks the rows of `other` under `self`; column names must agree.
    pub fn concat_rows(&self, other: &CovariateTable) -> Result<CovariateTable> {
        if self.names != other.names {
            return Err(Error::Validation("cannot stack tables with different columns".into()));
        }
        let columns =
            self.columns.iter().zip(&other.columns).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
        Ok(CovariateTable { names: self.names.clone(), columns, n_rows: self.n_rows + other.n_rows })
    }

    /// Applies `f` to every observed cell, keeping missingness.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> CovariateTable {
        let columns = self.columns.iter().map(|c| c.iter().map(|v| v.map(&f)).collect()).collect();
        CovariateTable { names: self.names.clone(), columns, n_rows: self.n_rows }
    }
}

/// Trial (treated = true) and external-control (treated = false) subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSample {
    covariates: CovariateTable,
    treated: Vec<bool>,
    outcome: Vec<f64>,
    subject_id: Vec<String>,
}

impl PooledSample {
    pub fn new(
        covariates: CovariateTable,
        treated: Vec<bool>,
        outcome: Vec<f64>,
        subject_id: Vec<String>,
    ) -> Result<Self> {
        let n = covariates.n_rows();
        if treated.len() != n || outcome.len() != n || subject_id.len() != n {
            return Err(Error::Validation(format!(
                "misaligned sample: {n} covariate rows, {} treatment, {} outcome, {} ids",
                treated.len(),
                outcome.len(),
                subject_id.len()
            )));
        }
        if let Some(i) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(Error::Validation(format!("outcome of subject `{}` is not finite", subject_id[i])));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &subject_id {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate subject id `{id}`")));
            }
        }
        let sample = Self { covariates, treated, outcome, subject_id };
        sample.check_arms()?;
        Ok(sample)
    }

    fn check_arms(&self) -> Result<()> {
        let (n1, n0) = (self.n1(), self.n0());
        if n1 < 2 || n0 < 2 {
            return Err(Error::DegenerateCohort(format!("need at least 2 subjects per arm, got n1={n1}, n0={n0}")));
        }
        Ok(())
    }

    pub fn covariates(&self) -> &CovariateTable {
        &self.covariates
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_id
    }

    pub fn n(&self) -> usize {
        self.treated.len()
    }

    pub fn n1(&self) -> usize {
        self.treated.iter().filter(|&&a| a).count()
    }

    pub fn n0(&self) -> usize {
        self.n() - self.n1()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treated[i]).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.treated[i]).collect()
    }

    /// Row subset without repeats; arm sizes are re-validated.
    pub fn subset(&self, rows: &[usize]) -> Result<PooledSample> {
        Self::new(
            self.covariates.select_rows(rows),
            rows.iter().map(|&r| self.treated[r]).collect(),
            rows.iter().map(|&r| self.outcome[r]).collect(),
            rows.iter().map(|&r| self.subject_id[r].clone()).collect(),
        )
    }

    /// Row subset that may repeat rows (bootstrap draws). Repeated subjects get
    /// an `#k` suffix so ids stay unique; the returned vector holds the source
    /// subject id of every row, for grouping copies together.
    pub fn resample(&self, rows: &[usize]) -> Result<(PooledSample, Vec<String>)> {
        let mut copies: HashMap<usize, usize> = HashMap::new();
        let mut ids = Vec::with_capacity(rows.len());
        let mut groups = Vec::with_capacity(rows.len());
        for &r in rows {
            let k = copies.entry(r).or_insert(0);
            let base = &self.subject_id[r];
            ids.push(if *k == 0 { base.clone() } else { format!("{base}#{k}") });
            groups.push(base.clone());
            *k += 1;
        }
        let sample = Self::new(
            self.covariates.select_rows(rows),
            rows.iter().map(|&r| self.treated[r]).collect(),
            rows.iter().map(|&r| self.outcome[r]).collect(),
            ids,
        )?;
        Ok((sample, groups))
    }

    /// Same subjects with a different covariate representation.
    pub fn with_covariates(&self, covariates: CovariateTable) -> Result<PooledSample> {
        Self::new(covariates, self.treated.clone(), self.outcome.clone(), self.subject_id.clone())
    }

    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<PooledSample> {
        Self::new(self.covariates.clone(), self.treated.clone(), outcome, self.subject_id.clone())
    }
}
