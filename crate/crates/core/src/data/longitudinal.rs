use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub t: f64,
    pub y: f64,
}

/// Baseline measurement plus post-baseline visits for one subject. Times are
/// in days; `covariate_row` points into the covariate table of the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalRecord {
    pub subject_id: String,
    pub t0: f64,
    pub y0: f64,
    pub visits: Vec<Visit>,
    pub covariate_row: usize,
}

/// One training row: empirical velocity of a single post-baseline visit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityRow {
    pub subject_id: String,
    pub covariate_row: usize,
    pub t: f64,
    pub elapsed: f64,
    pub velocity: f64,
}

/// The visit chosen to represent a subject's outcome at the analysis horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationRow {
    pub subject_id: String,
    pub covariate_row: usize,
    pub t0: f64,
    pub y0: f64,
    pub t: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityTable {
    pub training: Vec<VelocityRow>,
    pub evaluation: Vec<EvaluationRow>,
    /// Visits dropped because they do not lie strictly after baseline.
    pub skipped_visits: usize,
    /// Subjects without a visit within `horizon ± window`.
    pub excluded_from_evaluation: Vec<String>,
}

/// Builds velocity training rows and horizon evaluation rows.
///
/// `horizon` is measured from each subject's baseline time. The evaluation
/// visit is the one closest to `t0 + horizon` within `±window`; on equal
/// distance the earlier visit wins.
pub fn compute_velocities(records: &[LongitudinalRecord], horizon: f64, window: f64) -> Result<VelocityTable> {
    if !(window > 0.0) || !window.is_finite() {
        return Err(Error::InvalidInput(format!("window must be positive, got {window}")));
    }
    if !horizon.is_finite() {
        return Err(Error::InvalidInput("horizon must be finite".into()));
    }
    let mut ids = HashSet::new();
    let mut table = VelocityTable {
        training: Vec::new(),
        evaluation: Vec::new(),
        skipped_visits: 0,
        excluded_from_evaluation: Vec::new(),
    };

    for rec in records {
        if !ids.insert(rec.subject_id.as_str()) {
            return Err(Error::Validation(format!("duplicate subject `{}`", rec.subject_id)));
        }
        if !rec.y0.is_finite() || !rec.t0.is_finite() {
            return Err(Error::Validation(format!(
                "subject `{}` has a missing baseline outcome or time",
                rec.subject_id
            )));
        }
        let mut times = HashSet::new();
        for v in &rec.visits {
            if !times.insert(v.t.to_bits()) {
                return Err(Error::Validation(format!("subject `{}` has two visits at t={}", rec.subject_id, v.t)));
            }
        }

        let target = rec.t0 + horizon;
        let mut best: Option<(f64, &Visit)> = None;
        let mut valid: Vec<&Visit> = rec.visits.iter().collect();
        valid.sort_by(|a, b| a.t.total_cmp(&b.t));
        for v in valid {
            let elapsed = v.t - rec.t0;
            if !(elapsed > 0.0) {
                log::warn!("subject {}: visit at t={} not after baseline, skipped", rec.subject_id, v.t);
                table.skipped_visits += 1;
                continue;
            }
            table.training.push(VelocityRow {
                subject_id: rec.subject_id.clone(),
                covariate_row: rec.covariate_row,
                t: v.t,
                elapsed,
                velocity: (v.y - rec.y0) / elapsed,
            });
            let dist = (v.t - target).abs();
            if dist <= window && best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, v));
            }
        }
        match best {
            Some((_, v)) => table.evaluation.push(EvaluationRow {
                subject_id: rec.subject_id.clone(),
                covariate_row: rec.covariate_row,
                t0: rec.t0,
                y0: rec.y0,
                t: v.t,
                y: v.y,
            }),
            None => table.excluded_from_evaluation.push(rec.subject_id.clone()),
        }
    }
    Ok(table)
}
