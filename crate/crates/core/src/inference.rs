//! Variance estimation: closed-form asymptotic variances, the empirical
//! influence-function variance, and resampling schemes.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PooledSample;
use crate::error::{Error, Result};
use crate::estimators::{eif, gamma_from_weights, odds, psm_att, MatchingConfig, Method};
use crate::stats::{mean, rng_for, sample_variance};

/// Which outcome variance enters the matching variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsmForm {
    /// Marginal treated-outcome variance; needs no outcome model.
    #[default]
    Marginal,
    /// Conditional variance kappa^2.
    Conditional,
}

/// How kappa^2 is obtained from an outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KappaSource {
    /// `sigma0^2 (1 - rho0^2)`.
    #[default]
    Correlation,
    /// Mean squared out-of-fold control residual.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct VarianceComponents {
    pub sigma1_sq: Option<f64>,
    pub sigma0_sq: Option<f64>,
    pub kappa_sq: Option<f64>,
    pub rho0: Option<f64>,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    pub n1: usize,
    pub n0: usize,
    /// `sum_j K_j^2 / n_matched` for matching; 1 means no control reuse.
    pub match_reuse: Option<f64>,
    pub psm_form: PsmForm,
    pub notes: Vec<String>,
}

fn need(v: Option<f64>, name: &'static str) -> Result<f64> {
    v.ok_or(Error::MissingComponent(name))
}

/// Closed-form ATT variance for one method.
///
/// * PSM: `s (1 + r) / n1` with `s = sigma1^2` or `kappa^2` and reuse `r`
///   (`2 s / n1` without reuse)
/// * IPW: `sigma1^2/n1 + (kappa^2 + delta)/(gamma n0)`
/// * OM: `kappa^2 / n1`
/// * AIPW: `kappa^2 (1/n1 + 1/(gamma n0))`
pub fn asymptotic_variance(method: Method, c: &VarianceComponents) -> Result<f64> {
    if c.n1 == 0 {
        return Err(Error::InvalidInput("n1 must be positive".into()));
    }
    let n1 = c.n1 as f64;
    let n0 = c.n0 as f64;
    let v = match method {
        Method::Psm => {
            let s = match c.psm_form {
                PsmForm::Marginal => need(c.sigma1_sq, "sigma1_sq")?,
                PsmForm::Conditional => need(c.kappa_sq, "kappa_sq")?,
            };
            s * (1.0 + c.match_reuse.unwrap_or(1.0)) / n1
        }
        Method::Ipw => {
            let s1 = need(c.sigma1_sq, "sigma1_sq")?;
            let k = need(c.kappa_sq, "kappa_sq")?;
            let d = need(c.delta, "delta")?;
            let g = need(c.gamma, "gamma")?;
            s1 / n1 + (k + d) / (g * n0)
        }
        Method::Om => need(c.kappa_sq, "kappa_sq")? / n1,
        Method::Aipw => {
            let k = need(c.kappa_sq, "kappa_sq")?;
            let g = need(c.gamma, "gamma")?;
            k * (1.0 / n1 + 1.0 / (g * n0))
        }
    };
    Ok(v)
}

impl VarianceComponents {
    /// Plug-in components from a sample and whichever nuisances are available.
    /// Without an outcome model, rho0 is taken as 0 (so kappa^2 = sigma0^2)
    /// and delta as 0; both choices are recorded in `notes`.
    pub fn estimate(
        sample: &PooledSample,
        e_hat: Option<&[f64]>,
        mu0: Option<&[f64]>,
        rho0: Option<f64>,
        kappa_source: KappaSource,
    ) -> Self {
        let y = sample.outcome();
        let treated = sample.treated_indices();
        let controls = sample.control_indices();
        let y1: Vec<f64> = treated.iter().map(|&i| y[i]).collect();
        let y0: Vec<f64> = controls.iter().map(|&i| y[i]).collect();
        let sigma0_sq = sample_variance(&y0);
        let mut notes = Vec::new();

        let kappa_sq = match (mu0, rho0, kappa_source) {
            (Some(mu), _, KappaSource::Residual) => {
                mean(&controls.iter().map(|&i| (y[i] - mu[i]).powi(2)).collect::<Vec<_>>())
            }
            (_, Some(r), _) => sigma0_sq * (1.0 - r * r),
            _ => {
                notes.push("no outcome model: rho0 = 0, kappa_sq = sigma0_sq (conservative)".to_string());
                sigma0_sq
            }
        };
        let weights: Option<Vec<f64>> = e_hat.map(|e| controls.iter().map(|&i| odds(e[i])).collect());
        let gamma = weights.as_ref().map(|w| gamma_from_weights(treated.len(), w));
        let delta = match (&weights, mu0) {
            (Some(w), Some(mu)) => {
                let wm: Vec<f64> = w.iter().zip(&controls).map(|(w, &i)| w * mu[i]).collect();
                let w2 = mean(&w.iter().map(|w| w * w).collect::<Vec<_>>());
                Some(sample_variance(&wm) / w2)
            }
            (Some(_), None) => {
                notes.push("no outcome model: delta = 0 (optimistic)".to_string());
                Some(0.0)
            }
            _ => None,
        };
        Self {
            sigma1_sq: Some(sample_variance(&y1)),
            sigma0_sq: Some(sigma0_sq),
            kappa_sq: Some(kappa_sq),
            rho0,
            delta,
            gamma,
            n1: treated.len(),
            n0: controls.len(),
            match_reuse: None,
            psm_form: PsmForm::default(),
            notes,
        }
    }
}

/// Per-row influence values and the estimate they were centred at.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EifVector {
    pub phi: Vec<f64>,
    pub tau_ref: f64,
}

impl EifVector {
    /// `Var(phi) / n`.
    pub fn variance(&self) -> f64 {
        sample_variance(&self.phi) / self.phi.len() as f64
    }
}

pub fn eif_values(sample: &PooledSample, e_hat: &[f64], mu0: &[f64], tau_hat: f64) -> Result<EifVector> {
    if e_hat.len() != sample.n() || mu0.len() != sample.n() {
        return Err(Error::InvalidInput("influence inputs are not aligned with the sample".into()));
    }
    Ok(EifVector { phi: eif(sample, e_hat, mu0, tau_hat), tau_ref: tau_hat })
}

/// One resampled data set handed to a replicate estimator.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub index: usize,
    /// Source rows, in draw order.
    pub rows: Vec<usize>,
    pub sample: PooledSample,
    /// Source subject id of every row (copies share a group).
    pub groups: Vec<String>,
    /// Seed reserved for randomness inside the replicate.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResamplingSummary {
    pub variance: f64,
    pub replicates: usize,
    pub failed: usize,
}

pub const MAX_FAILURE_FRACTION: f64 = 0.05;

fn summarize(draws: Vec<Result<f64>>) -> Result<(Vec<f64>, usize)> {
    let total = draws.len();
    let mut ok = Vec::with_capacity(total);
    let mut failed = 0;
    for d in draws {
        match d {
            Ok(v) if v.is_finite() => ok.push(v),
            Ok(_) => failed += 1,
            Err(e) => {
                log::debug!("replicate failed: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 || ok.len() < 2 {
        return Err(Error::ReplicateFailures { failed, total });
    }
    Ok((ok, failed))
}

/// Nonparametric bootstrap, resampling with replacement within each arm.
/// `estimate` returns the point estimate on one replicate; it decides whether
/// nuisances are refit or looked up by `rows`.
pub fn bootstrap_variance<F>(
    sample: &PooledSample,
    replicates: usize,
    seed: u64,
    estimate: F,
) -> Result<ResamplingSummary>
where
    F: Fn(&Replicate) -> Result<f64> + Sync,
{
    if replicates < 100 {
        return Err(Error::InvalidInput(format!("bootstrap needs at least 100 replicates, got {replicates}")));
    }
    let treated = sample.treated_indices();
    let controls = sample.control_indices();
    let draws: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, b as u64);
            let mut rows = Vec::with_capacity(sample.n());
            rows.extend((0..treated.len()).map(|_| treated[rng.random_range(0..treated.len())]));
            rows.extend((0..controls.len()).map(|_| controls[rng.random_range(0..controls.len())]));
            let (s, groups) = sample.resample(&rows)?;
            estimate(&Replicate { index: b, rows, sample: s, groups, seed: rng.random() })
        })
        .collect();
    let (ok, failed) = summarize(draws)?;
    Ok(ResamplingSummary { variance: sample_variance(&ok), replicates, failed })
}

/// `ceil(n^(2/3))`, exact for perfect cubes.
pub fn default_subsample_size(n: usize) -> usize {
    let x = (n as f64).powf(2.0 / 3.0);
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Subsampling without replacement at size `b` (arm fractions preserved),
/// with the replicate variance rescaled by `b / n`.
pub fn subsample_variance<F>(
    sample: &PooledSample,
    b: usize,
    replicates: usize,
    seed: u64,
    estimate: F,
) -> Result<ResamplingSummary>
where
    F: Fn(&Replicate) -> Result<f64> + Sync,
{
    let n = sample.n();
    if b >= n {
        return Err(Error::InvalidInput(format!("subsample size {b} must be below n = {n}")));
    }
    let treated = sample.treated_indices();
    let controls = sample.control_indices();
    let b1 = ((b as f64) * treated.len() as f64 / n as f64).round() as usize;
    let b0 = b - b1;
    if b1 < 2 || b0 < 2 {
        return Err(Error::InvalidInput(format!(
            "subsample size {b} leaves {b1} treated and {b0} controls; need at least 2 of each"
        )));
    }
    let draws: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(seed, r as u64);
            let mut rows: Vec<usize> =
                sample_indices(&mut rng, treated.len(), b1).into_iter().map(|k| treated[k]).collect();
            rows.extend(sample_indices(&mut rng, controls.len(), b0).into_iter().map(|k| controls[k]));
            let (s, groups) = sample.resample(&rows)?;
            estimate(&Replicate { index: r, rows, sample: s, groups, seed: rng.random() })
        })
        .collect();
    let (ok, failed) = summarize(draws)?;
    Ok(ResamplingSummary { variance: sample_variance(&ok) * b as f64 / n as f64, replicates, failed })
}

/// Subsampling variance of the matching estimator with propensities held at
/// their full-sample values. `b` defaults to `ceil(n^(2/3))`.
pub fn subsample_bootstrap_psm(
    sample: &PooledSample,
    e_hat: &[f64],
    b: Option<usize>,
    replicates: usize,
    seed: u64,
    matching: &MatchingConfig,
) -> Result<ResamplingSummary> {
    let b = b.unwrap_or_else(|| default_subsample_size(sample.n()));
    subsample_variance(sample, b, replicates, seed, |rep| {
        let e: Vec<f64> = rep.rows.iter().map(|&i| e_hat[i]).collect();
        Ok(psm_att(&rep.sample, &e, matching)?.0.tau_hat)
    })
}

/// `|tau_hat - tau_expected| / sd_hist`.
pub fn standardized_bias(tau_hat: f64, tau_expected: f64, sd_hist: f64) -> Result<f64> {
    if !(sd_hist > 0.0) {
        return Err(Error::InvalidInput(format!("outcome standard deviation must be positive, got {sd_hist}")));
    }
    Ok((tau_hat - tau_expected).abs() / sd_hist)
}
