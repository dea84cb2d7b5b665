use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::stats::rng_for;

/// Fold layout for nested cross-fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossFitPlan {
    #[serde(default = "default_outer")]
    pub outer_folds: usize,
    #[serde(default = "default_inner")]
    pub inner_folds: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_outer() -> usize {
    5
}

fn default_inner() -> usize {
    3
}

impl Default for CrossFitPlan {
    fn default() -> Self {
        Self { outer_folds: default_outer(), inner_folds: default_inner(), seed: 0 }
    }
}

impl CrossFitPlan {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// Assigns every row to one of `k` folds so that all rows of a group share a
/// fold. With `strata`, groups are dealt round-robin within each stratum
/// (stratum of a group = label of its first row), which balances labels.
pub fn assign_folds(groups: &[String], strata: Option<&[bool]>, k: usize, seed: u64, stream: u64) -> Vec<usize> {
    assert!(k >= 1);
    let mut order: Vec<&str> = Vec::new();
    let mut label: HashMap<&str, bool> = HashMap::new();
    for (i, g) in groups.iter().enumerate() {
        if !label.contains_key(g.as_str()) {
            order.push(g.as_str());
            label.insert(g.as_str(), strata.is_some_and(|s| s[i]));
        }
    }
    let mut rng = rng_for(seed, stream);
    let mut fold_of: HashMap<&str, usize> = HashMap::with_capacity(order.len());
    let mut next = 0usize;
    for stratum in [true, false] {
        let mut members: Vec<&str> = order.iter().copied().filter(|g| label[g] == stratum).collect();
        members.shuffle(&mut rng);
        for g in members {
            fold_of.insert(g, next % k);
            next += 1;
        }
    }
    groups.iter().map(|g| fold_of[g.as_str()]).collect()
}

pub(crate) fn split(folds: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &f) in folds.iter().enumerate() {
        if f == k {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}
