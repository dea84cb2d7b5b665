use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::PooledSample;
use crate::error::{Error, Result};

/// One inclusion rule on a covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EligibilityRule {
    Min { column: String, threshold: f64 },
    Max { column: String, threshold: f64 },
    InSet { column: String, values: Vec<f64> },
}

impl EligibilityRule {
    pub fn column(&self) -> &str {
        match self {
            Self::Min { column, .. } | Self::Max { column, .. } | Self::InSet { column, .. } => column,
        }
    }

    /// Missing values never satisfy a rule.
    pub fn admits(&self, value: Option<f64>) -> bool {
        let Some(v) = value else { return false };
        match self {
            Self::Min { threshold, .. } => v >= *threshold,
            Self::Max { threshold, .. } => v <= *threshold,
            Self::InSet { values, .. } => values.contains(&v),
        }
    }

    fn describe(&self) -> String {
        match self {
            Self::Min { column, threshold } => format!("{column} >= {threshold}"),
            Self::Max { column, threshold } => format!("{column} <= {threshold}"),
            Self::InSet { column, values } => format!("{column} in {values:?}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EligibilityFilter {
    pub rules: Vec<EligibilityRule>,
}

impl EligibilityFilter {
    pub fn new(rules: Vec<EligibilityRule>) -> Self {
        Self { rules }
    }

    pub fn validate(&self, sample: &PooledSample) -> Result<()> {
        let mut bounds: HashMap<&str, (f64, f64)> = HashMap::new();
        for rule in &self.rules {
            let col = rule.column();
            if sample.covariates().index_of(col).is_none() {
                return Err(Error::Validation(format!("eligibility rule references unknown column `{col}`")));
            }
            let entry = bounds.entry(col).or_insert((f64::NEG_INFINITY, f64::INFINITY));
            match rule {
                EligibilityRule::Min { threshold, .. } => entry.0 = entry.0.max(*threshold),
                EligibilityRule::Max { threshold, .. } => entry.1 = entry.1.min(*threshold),
                EligibilityRule::InSet { .. } => {}
            }
        }
        for (col, (lo, hi)) in bounds {
            if lo > hi {
                return Err(Error::Validation(format!(
                    "eligibility bounds on `{col}` are inverted: min {lo} > max {hi}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleExclusions {
    pub rule: String,
    /// Rows failing this rule (a row failing several rules counts in each).
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EligibilityReport {
    pub per_rule: Vec<RuleExclusions>,
    pub total_excluded: usize,
    pub kept: usize,
}

pub fn apply_eligibility(
    sample: &PooledSample,
    filter: &EligibilityFilter,
) -> Result<(PooledSample, EligibilityReport)> {
    filter.validate(sample)?;
    let x = sample.covariates();
    let mut failing = vec![0usize; filter.rules.len()];
    let mut keep = Vec::with_capacity(sample.n());
    for i in 0..sample.n() {
        let mut ok = true;
        for (k, rule) in filter.rules.iter().enumerate() {
            let j = x.index_of(rule.column()).expect("validated");
            if !rule.admits(x.get(i, j)) {
                failing[k] += 1;
                ok = false;
            }
        }
        if ok {
            keep.push(i);
        }
    }
    let report = EligibilityReport {
        per_rule: filter
            .rules
            .iter()
            .zip(&failing)
            .map(|(r, &excluded)| RuleExclusions { rule: r.describe(), excluded })
            .collect(),
        total_excluded: sample.n() - keep.len(),
        kept: keep.len(),
    };
    let filtered = sample.subset(&keep).map_err(|e| match e {
        Error::DegenerateCohort(m) => Error::DegenerateCohort(format!("after eligibility: {m}")),
        other => other,
    })?;
    Ok((filtered, report))
}
