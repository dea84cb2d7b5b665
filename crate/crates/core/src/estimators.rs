//! ATT point estimators: propensity matching, inverse probability weighting,
//! the outcome-model plug-in and the augmented (doubly robust) estimator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::PooledSample;
use crate::error::{Error, Result};
use crate::stats::{logit, mean, sample_sd, sample_variance};

pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Psm,
    Ipw,
    Om,
    Aipw,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Psm, Method::Ipw, Method::Om, Method::Aipw];

    pub fn needs_propensity(self) -> bool {
        matches!(self, Method::Psm | Method::Ipw | Method::Aipw)
    }

    pub fn needs_outcome(self) -> bool {
        matches!(self, Method::Om | Method::Aipw)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Psm => "PSM",
            Method::Ipw => "IPW",
            Method::Om => "OM",
            Method::Aipw => "AIPW",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttEstimate {
    pub method: Method,
    pub tau_hat: f64,
    pub variance: f64,
    pub ci95: (f64, f64),
    pub n1_used: usize,
    pub n0_used: usize,
    pub gamma_hat: Option<f64>,
    pub diagnostics: BTreeMap<String, Value>,
}

impl AttEstimate {
    fn new(method: Method, tau_hat: f64, variance: f64, n1_used: usize, n0_used: usize) -> Self {
        let mut est = Self {
            method,
            tau_hat,
            variance: 0.0,
            ci95: (tau_hat, tau_hat),
            n1_used,
            n0_used,
            gamma_hat: None,
            diagnostics: BTreeMap::new(),
        };
        est.set_variance(variance);
        est
    }

    /// Replaces the variance and recomputes the normal-approximation interval.
    pub fn set_variance(&mut self, variance: f64) {
        let v = variance.max(0.0);
        let half = Z_975 * v.sqrt();
        self.variance = v;
        self.ci95 = (self.tau_hat - half, self.tau_hat + half);
    }

    pub fn se(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci95.0 <= value && value <= self.ci95.1
    }

    fn note(&mut self, key: &str, value: Value) {
        self.diagnostics.insert(key.to_string(), value);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapRegion {
    pub lower: f64,
    pub upper: f64,
    pub kept_treated: usize,
    pub kept_control: usize,
}

/// Rows whose propensity lies in the common support of both arms.
pub fn trim_overlap(sample: &PooledSample, e_hat: &[f64]) -> Result<(Vec<usize>, OverlapRegion)> {
    check_len(sample, e_hat, "propensity")?;
    let (mut lo1, mut hi1, mut lo0, mut hi0) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (&a, &e) in sample.treated().iter().zip(e_hat) {
        if a {
            lo1 = lo1.min(e);
            hi1 = hi1.max(e);
        } else {
            lo0 = lo0.min(e);
            hi0 = hi0.max(e);
        }
    }
    let (lower, upper) = (lo1.max(lo0), hi1.min(hi0));
    if lower > upper {
        return Err(Error::NoOverlap(format!(
            "treated propensities [{lo1:.4}, {hi1:.4}] and control propensities [{lo0:.4}, {hi0:.4}] are disjoint"
        )));
    }
    let rows: Vec<usize> = (0..sample.n()).filter(|&i| (lower..=upper).contains(&e_hat[i])).collect();
    let kept_treated = rows.iter().filter(|&&i| sample.treated()[i]).count();
    let kept_control = rows.len() - kept_treated;
    if kept_treated == 0 || kept_control == 0 {
        return Err(Error::NoOverlap(format!(
            "overlap region [{lower:.4}, {upper:.4}] leaves {kept_treated} treated and {kept_control} controls"
        )));
    }
    Ok((rows, OverlapRegion { lower, upper, kept_treated, kept_control }))
}

fn check_len(sample: &PooledSample, v: &[f64], what: &str) -> Result<()> {
    if v.len() != sample.n() {
        return Err(Error::InvalidInput(format!("{what} vector has {} entries for {} rows", v.len(), sample.n())));
    }
    Ok(())
}

fn check_propensity(sample: &PooledSample, e_hat: &[f64]) -> Result<()> {
    check_len(sample, e_hat, "propensity")?;
    if let Some(i) = e_hat.iter().position(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(Error::Positivity(format!(
            "propensity {} for subject `{}` is outside (0, 1)",
            e_hat[i],
            sample.subject_ids()[i]
        )));
    }
    Ok(())
}

/// Control odds `e / (1 - e)`.
pub fn odds(e: f64) -> f64 {
    e / (1.0 - e)
}

/// `(n1^2 / n0) / sum over controls of w^2`.
pub fn gamma_from_weights(n1: usize, control_weights: &[f64]) -> f64 {
    let n1 = n1 as f64;
    let s2: f64 = control_weights.iter().map(|w| w * w).sum();
    n1 * n1 / control_weights.len() as f64 / s2
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// `(treated_row, control_row, |logit difference|)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_treated: usize,
    /// Absolute caliper on the logit scale; infinite when disabled.
    pub caliper: f64,
    pub with_replacement: bool,
}

impl MatchResult {
    /// Number of times each matched control is used.
    pub fn control_use(&self) -> HashMap<usize, usize> {
        let mut k = HashMap::new();
        for &(_, c, _) in &self.pairs {
            *k.entry(c).or_insert(0) += 1;
        }
        k
    }

    /// `sum_j K_j^2 / n_matched`; 1 when every control is used at most once.
    pub fn reuse_factor(&self) -> f64 {
        let sq: usize = self.control_use().values().map(|k| k * k).sum();
        sq as f64 / self.pairs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    #[serde(default = "default_true")]
    pub with_replacement: bool,
    /// Caliper as a multiple of SD(logit e) over all rows; `None` disables it.
    #[serde(default = "default_caliper")]
    pub caliper_sd: Option<f64>,
}

fn default_true() -> bool {
    true
}

fn default_caliper() -> Option<f64> {
    Some(0.2)
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self { with_replacement: true, caliper_sd: default_caliper() }
    }
}

fn nearest_sorted(sorted: &[(f64, usize)], t: f64) -> usize {
    // first element of the run of equal logits containing position p
    let run_start = |p: usize| sorted.partition_point(|c| c.0 < sorted[p].0);
    let p = sorted.partition_point(|c| c.0 < t);
    let right = (p < sorted.len()).then(|| run_start(p));
    let left = (p > 0).then(|| run_start(p - 1));
    match (left, right) {
        (Some(l), Some(r)) => {
            let (dl, dr) = (t - sorted[l].0, sorted[r].0 - t);
            if dl < dr || (dl == dr && sorted[l].1 < sorted[r].1) {
                l
            } else {
                r
            }
        }
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (None, None) => unreachable!("no controls"),
    }
}

/// Nearest-neighbour matching on logit propensity.
pub fn match_on_propensity(sample: &PooledSample, e_hat: &[f64], config: &MatchingConfig) -> Result<MatchResult> {
    check_propensity(sample, e_hat)?;
    let lg: Vec<f64> = e_hat.iter().map(|&e| logit(e)).collect();
    let caliper = match config.caliper_sd {
        Some(m) => m * sample_sd(&lg),
        None => f64::INFINITY,
    };
    let treated = sample.treated_indices();
    let controls = sample.control_indices();
    let mut pairs = Vec::with_capacity(treated.len());

    if config.with_replacement {
        let mut sorted: Vec<(f64, usize)> = controls.iter().map(|&c| (lg[c], c)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &t in &treated {
            let (lc, c) = sorted[nearest_sorted(&sorted, lg[t])];
            let d = (lg[t] - lc).abs();
            if d <= caliper {
                pairs.push((t, c, d));
            }
        }
    } else {
        let mut order = treated.clone();
        order.sort_by(|&a, &b| e_hat[b].total_cmp(&e_hat[a]).then(a.cmp(&b)));
        let mut available = vec![true; controls.len()];
        for &t in &order {
            let mut best: Option<(f64, usize)> = None;
            for (k, &c) in controls.iter().enumerate() {
                if !available[k] {
                    continue;
                }
                let d = (lg[t] - lg[c]).abs();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, k));
                }
            }
            if let Some((d, k)) = best.filter(|(d, _)| *d <= caliper) {
                available[k] = false;
                pairs.push((t, controls[k], d));
            }
        }
        pairs.sort_by_key(|p| p.0);
    }
    Ok(MatchResult {
        unmatched_treated: treated.len() - pairs.len(),
        pairs,
        caliper,
        with_replacement: config.with_replacement,
    })
}

/// Mean matched difference `Y_i - Y_m(i)`. The variance is
/// `s1^2 / n_m * (1 + sum K_j^2 / n_m)`, with `s1^2` the variance of matched
/// treated outcomes; without control reuse it equals `2 s1^2 / n_m`.
pub fn psm_att(sample: &PooledSample, e_hat: &[f64], config: &MatchingConfig) -> Result<(AttEstimate, MatchResult)> {
    let m = match_on_propensity(sample, e_hat, config)?;
    if m.pairs.is_empty() {
        return Err(Error::Estimation("no treated unit has a control within the caliper".into()));
    }
    let y = sample.outcome();
    let diffs: Vec<f64> = m.pairs.iter().map(|&(t, c, _)| y[t] - y[c]).collect();
    let tau = mean(&diffs);
    let yt: Vec<f64> = m.pairs.iter().map(|&(t, _, _)| y[t]).collect();
    let nm = m.pairs.len();
    let reuse = m.reuse_factor();
    let variance = sample_variance(&yt) / nm as f64 * (1.0 + reuse);
    let mut est = AttEstimate::new(Method::Psm, tau, variance, nm, m.control_use().len());
    est.note("unmatched_treated", json!(m.unmatched_treated));
    est.note("caliper", if m.caliper.is_finite() { json!(m.caliper) } else { Value::Null });
    est.note("with_replacement", json!(m.with_replacement));
    est.note("match_reuse_factor", json!(reuse));
    est.note("sigma1_sq_matched", json!(sample_variance(&yt)));
    Ok((est, m))
}

/// Pieces shared by IPW, OM and AIPW: `mean_{A=1}(Y - mu)` and
/// `(1/n1) sum_{A=0} w (Y - mu)`. Without `mu` the residual is `Y - 0`.
struct Parts {
    treated_term: f64,
    control_term: f64,
    n1: usize,
    n0: usize,
}

fn residual(y: &[f64], mu: Option<&[f64]>, i: usize) -> f64 {
    y[i] - mu.map_or(0.0, |m| m[i])
}

fn treated_term(sample: &PooledSample, mu: Option<&[f64]>) -> (f64, usize) {
    let y = sample.outcome();
    let mut s = 0.0;
    let mut n1 = 0;
    for i in sample.treated_indices() {
        s += residual(y, mu, i);
        n1 += 1;
    }
    (s / n1 as f64, n1)
}

fn parts(sample: &PooledSample, e_hat: &[f64], mu: Option<&[f64]>) -> Parts {
    let y = sample.outcome();
    let (treated_term, n1) = treated_term(sample, mu);
    let mut s = 0.0;
    let mut n0 = 0;
    for i in sample.control_indices() {
        s += odds(e_hat[i]) * residual(y, mu, i);
        n0 += 1;
    }
    Parts { treated_term, control_term: s / n1 as f64, n1, n0 }
}

fn weight_diagnostics(est: &mut AttEstimate, sample: &PooledSample, e_hat: &[f64]) -> Result<()> {
    let w: Vec<f64> = sample.control_indices().iter().map(|&i| odds(e_hat[i])).collect();
    if let Some(k) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite weight for control `{}`",
            sample.subject_ids()[sample.control_indices()[k]]
        )));
    }
    let gamma = gamma_from_weights(sample.n1(), &w);
    est.gamma_hat = Some(gamma);
    est.note("max_weight", json!(w.iter().copied().fold(0.0, f64::max)));
    est.note("sum_weights_over_n1", json!(w.iter().sum::<f64>() / sample.n1() as f64));
    est.note("effective_n0", json!(gamma * sample.n0() as f64));
    Ok(())
}

/// `mean_{A=1} Y - (1/n1) sum_{A=0} w Y`. The attached variance is the plug-in
/// `s1^2/n1 + (n0/n1^2) Var_{A=0}(w Y)`.
pub fn ipw_att(sample: &PooledSample, e_hat: &[f64]) -> Result<AttEstimate> {
    check_propensity(sample, e_hat)?;
    let p = parts(sample, e_hat, None);
    let tau = p.treated_term - p.control_term;
    let y = sample.outcome();
    let y1: Vec<f64> = sample.treated_indices().iter().map(|&i| y[i]).collect();
    let wy: Vec<f64> = sample.control_indices().iter().map(|&i| odds(e_hat[i]) * y[i]).collect();
    let (n1, n0) = (p.n1 as f64, p.n0 as f64);
    let variance = sample_variance(&y1) / n1 + n0 / (n1 * n1) * sample_variance(&wy);
    let mut est = AttEstimate::new(Method::Ipw, tau, variance, p.n1, p.n0);
    weight_diagnostics(&mut est, sample, e_hat)?;
    Ok(est)
}

fn check_predictions(sample: &PooledSample, mu0: &[f64], rows: &[usize]) -> Result<()> {
    check_len(sample, mu0, "outcome prediction")?;
    let bad: Vec<&str> =
        rows.iter().filter(|&&i| !mu0[i].is_finite()).map(|&i| sample.subject_ids()[i].as_str()).collect();
    if !bad.is_empty() {
        return Err(Error::Estimation(format!("missing outcome-model prediction for subjects: {}", bad.join(", "))));
    }
    Ok(())
}

/// `mean_{A=1}(Y - mu0)`. Only treated rows of `mu0` are read. The attached
/// variance is the treated residual variance over n1.
pub fn om_att(sample: &PooledSample, mu0: &[f64]) -> Result<AttEstimate> {
    let treated = sample.treated_indices();
    check_predictions(sample, mu0, &treated)?;
    let (tau, n1) = treated_term(sample, Some(mu0));
    let r: Vec<f64> = treated.iter().map(|&i| sample.outcome()[i] - mu0[i]).collect();
    let variance = sample_variance(&r) / n1 as f64;
    let mut est = AttEstimate::new(Method::Om, tau, variance, n1, sample.n0());
    est.note("treated_residual_variance", json!(sample_variance(&r)));
    Ok(est)
}

/// `mean_{A=1}(Y - mu0) - (1/n1) sum_{A=0} w (Y - mu0)`, with the empirical
/// influence-function variance attached.
pub fn aipw_att(sample: &PooledSample, e_hat: &[f64], mu0: &[f64]) -> Result<AttEstimate> {
    check_propensity(sample, e_hat)?;
    check_predictions(sample, mu0, &(0..sample.n()).collect::<Vec<_>>())?;
    let p = parts(sample, e_hat, Some(mu0));
    let tau = p.treated_term - p.control_term;
    debug_assert_eq!(tau, treated_term(sample, Some(mu0)).0 - p.control_term);
    let phi = eif(sample, e_hat, mu0, tau);
    let variance = sample_variance(&phi) / sample.n() as f64;
    let mut est = AttEstimate::new(Method::Aipw, tau, variance, p.n1, p.n0);
    est.note("om_term", json!(p.treated_term));
    est.note("weighted_control_residual", json!(p.control_term));
    weight_diagnostics(&mut est, sample, e_hat)?;
    Ok(est)
}

/// Per-row efficient influence function of the ATT at `tau`, with `p1 = n1/n`.
pub fn eif(sample: &PooledSample, e_hat: &[f64], mu0: &[f64], tau: f64) -> Vec<f64> {
    let p1 = sample.n1() as f64 / sample.n() as f64;
    let y = sample.outcome();
    (0..sample.n())
        .map(|i| {
            let r = y[i] - mu0[i];
            if sample.treated()[i] {
                (r - tau) / p1
            } else {
                -odds(e_hat[i]) * r / p1
            }
        })
        .collect()
}
