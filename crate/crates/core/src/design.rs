//! Prospective design: the efficiency factor gamma, AIPW power, required
//! trial size and the sample-size ratio against a 1:1 randomized trial.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{CovariateTable, PooledSample};
use crate::error::{Error, Result};
use crate::estimators::{gamma_from_weights, odds, trim_overlap};
use crate::nuisance::{fit_propensity, CrossFitPlan, PropensityConfig};
use crate::stats::{norm_cdf, norm_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMethod {
    Pilot,
    GaussianSmd,
    Mixed,
    DiscreteChi2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaEstimate {
    /// In `(0, 1]`.
    pub value: f64,
    /// Before capping at 1 (sampling noise can push the pilot estimate above 1).
    pub raw_value: f64,
    pub method: GammaMethod,
    pub inputs: Value,
}

impl GammaEstimate {
    fn new(raw: f64, method: GammaMethod, inputs: Value) -> Self {
        Self { value: raw.min(1.0), raw_value: raw, method, inputs }
    }
}

/// Gamma from a propensity model separating a proxy trial cohort (treated)
/// from historical controls, using out-of-fold odds on the controls.
pub fn gamma_pilot(
    proxy_trial: &CovariateTable,
    historical: &CovariateTable,
    config: &PropensityConfig,
    plan: &CrossFitPlan,
) -> Result<GammaEstimate> {
    let (n1, n0) = (proxy_trial.n_rows(), historical.n_rows());
    if n1 < 10 || n0 < 10 {
        return Err(Error::InvalidInput(format!("pilot gamma needs at least 10 rows per cohort, got {n1} and {n0}")));
    }
    let pooled = proxy_trial.concat_rows(historical)?;
    let treated: Vec<bool> = (0..n1 + n0).map(|i| i < n1).collect();
    let ids = (0..n1 + n0).map(|i| format!("row{i}")).collect();
    let sample = PooledSample::new(pooled, treated, vec![0.0; n1 + n0], ids)?;
    let fit = fit_propensity(&sample, plan, config)?;
    trim_overlap(&sample, &fit.oof)?;
    let w: Vec<f64> = fit.oof[n1..].iter().map(|&e| odds(e)).collect();
    let raw = gamma_from_weights(n1, &w);
    let inputs = json!({
        "n1": n1,
        "n0": n0,
        "sum_w": w.iter().sum::<f64>(),
        "sum_w_sq": w.iter().map(|v| v * v).sum::<f64>(),
        "max_w": w.iter().copied().fold(0.0, f64::max),
        "lambda": fit.model.fit.lambda,
    });
    Ok(GammaEstimate::new(raw, GammaMethod::Pilot, inputs))
}

/// `exp(-sum SMD^2 - sum (pi1 - pi0)^2 / (pi1 (1 - pi1)))`.
pub fn gamma_smd(smds: &[f64], binary: &[(f64, f64)]) -> Result<GammaEstimate> {
    for &(p1, p0) in binary {
        if !(p1 > 0.0 && p1 < 1.0) || !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::InvalidInput(format!("binary prevalences must lie in (0, 1), got ({p1}, {p0})")));
        }
    }
    if smds.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("standardized mean differences must be finite".into()));
    }
    let cont: f64 = smds.iter().map(|s| s * s).sum();
    let bin: f64 = binary.iter().map(|(p1, p0)| (p1 - p0).powi(2) / (p1 * (1.0 - p1))).sum();
    let method = if binary.is_empty() { GammaMethod::GaussianSmd } else { GammaMethod::Mixed };
    let inputs = json!({ "smds": smds, "binary": binary, "d_m_sq": cont + bin });
    Ok(GammaEstimate::new((-cont - bin).exp(), method, inputs))
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} has negative or non-finite mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `chi^2(P1 || P0) = sum (p1 - p0)^2 / p0`.
pub fn chi_square(p1: &[f64], p0: &[f64]) -> Result<f64> {
    if p1.len() != p0.len() || p1.is_empty() {
        return Err(Error::InvalidInput("distributions must share a non-empty support".into()));
    }
    check_distribution(p1, "p1")?;
    check_distribution(p0, "p0")?;
    let mut chi2 = 0.0;
    for (k, (&a, &b)) in p1.iter().zip(p0).enumerate() {
        if b == 0.0 {
            if a > 0.0 {
                return Err(Error::Positivity(format!("atom {k} has treated mass {a} but no control mass")));
            }
            continue;
        }
        chi2 += (a - b) * (a - b) / b;
    }
    Ok(chi2)
}

/// Exact `1 / (1 + chi^2(P1 || P0))` for finite distributions.
pub fn gamma_discrete_oracle(p1: &[f64], p0: &[f64]) -> Result<GammaEstimate> {
    let chi2 = chi_square(p1, p0)?;
    Ok(GammaEstimate::new(1.0 / (1.0 + chi2), GammaMethod::DiscreteChi2, json!({ "chi_square": chi2 })))
}

/// Bin probabilities of `N(mean, sd^2)` on the cells cut by `edges`
/// (two open-ended tails included), for using the discrete oracle on a
/// one-dimensional Gaussian.
pub fn discretize_gaussian(mean: f64, sd: f64, edges: &[f64]) -> Vec<f64> {
    let mut cdf: Vec<f64> = vec![0.0];
    cdf.extend(edges.iter().map(|&e| norm_cdf((e - mean) / sd)));
    cdf.push(1.0);
    cdf.windows(2).map(|w| w[1] - w[0]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentationGain {
    pub gamma_a: f64,
    pub gamma_new: f64,
    pub n_eff_a: f64,
    pub n_eff_new: f64,
}

/// Effect on the effective control size of adding pool B to pool A.
pub fn augmentation_gain(p1: &[f64], p0a: &[f64], n_a: f64, p0b: &[f64], n_b: f64) -> Result<AugmentationGain> {
    if !(n_a > 0.0) || !(n_b >= 0.0) {
        return Err(Error::InvalidInput("pool sizes must be positive".into()));
    }
    if p0b.len() != p0a.len() {
        return Err(Error::InvalidInput("pools must share a support".into()));
    }
    check_distribution(p0b, "p0b")?;
    let gamma_a = gamma_discrete_oracle(p1, p0a)?.value;
    let n = n_a + n_b;
    let pooled: Vec<f64> = p0a.iter().zip(p0b).map(|(a, b)| (n_a * a + n_b * b) / n).collect();
    // renormalize away rounding so the oracle's sum check holds
    let s: f64 = pooled.iter().sum();
    let pooled: Vec<f64> = pooled.iter().map(|v| v / s).collect();
    let gamma_new = gamma_discrete_oracle(p1, &pooled)?.value;
    Ok(AugmentationGain { gamma_a, gamma_new, n_eff_a: gamma_a * n_a, n_eff_new: gamma_new * n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSpec {
    pub alpha: f64,
    pub tau: f64,
    /// Conditional outcome variance; derived from `sigma0_sq` and `rho0` when absent.
    #[serde(default)]
    pub kappa_sq: Option<f64>,
    #[serde(default)]
    pub sigma0_sq: Option<f64>,
    #[serde(default)]
    pub rho0: f64,
    pub n1: f64,
    /// Control pool size; `None` for an unlimited pool.
    #[serde(default)]
    pub n0: Option<f64>,
    pub gamma: f64,
}

impl PowerSpec {
    pub fn kappa_sq(&self) -> Result<f64> {
        match (self.kappa_sq, self.sigma0_sq) {
            (Some(k), _) => Ok(k),
            (None, Some(s)) => Ok(s * (1.0 - self.rho0 * self.rho0)),
            (None, None) => Err(Error::MissingComponent("kappa_sq or sigma0_sq")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return bad("alpha must lie in (0, 0.5]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.n1 >= 1.0) || self.n0.is_some_and(|n0| !(n0 >= 1.0)) {
            return bad("n1 and n0 must be at least 1");
        }
        if !(-1.0..=1.0).contains(&self.rho0) {
            return bad("rho0 must lie in [-1, 1]");
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite");
        }
        let k = self.kappa_sq()?;
        if !(k > 0.0) || !k.is_finite() {
            return bad("kappa_sq must be positive");
        }
        Ok(())
    }

    fn control_term(&self) -> f64 {
        self.n0.map_or(0.0, |n0| 1.0 / (self.gamma * n0))
    }

    /// `kappa^2 (1/n1 + 1/(gamma n0))`.
    pub fn variance(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.kappa_sq()? * (1.0 / self.n1 + self.control_term()))
    }
}

fn power_at(alpha: f64, tau: f64, variance: f64) -> f64 {
    let z = norm_quantile(alpha / 2.0);
    let base = norm_cdf(z);
    let d = tau / variance.sqrt();
    // written as increments over the null so that tau = 0 returns alpha exactly
    alpha + (norm_cdf(z + d) - base) + (norm_cdf(z - d) - base)
}

/// Two-sided power of the AIPW test.
pub fn aipw_power(spec: &PowerSpec) -> Result<f64> {
    Ok(power_at(spec.alpha, spec.tau, spec.variance()?))
}

pub const MAX_N1: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleSize {
    Feasible { n1: u64, power: f64 },
    Infeasible { reason: String, max_power: f64 },
}

/// Smallest integer n1 reaching `target_power`; `spec.n1` is ignored.
pub fn solve_n1(spec: &PowerSpec, target_power: f64) -> Result<SampleSize> {
    let probe = PowerSpec { n1: 1.0, ..spec.clone() };
    probe.validate()?;
    if !(target_power > spec.alpha && target_power < 1.0) {
        return Err(Error::InvalidInput(format!("target power must lie in (alpha, 1), got {target_power}")));
    }
    let k = probe.kappa_sq()?;
    let floor = k * probe.control_term();
    let limit = if floor > 0.0 { power_at(spec.alpha, spec.tau, floor) } else { 1.0 };
    if limit <= target_power {
        return Ok(SampleSize::Infeasible {
            reason: format!(
                "control-arm variance floor kappa^2/(gamma n0) = {floor:.4e} caps power at {limit:.4} even as n1 grows"
            ),
            max_power: limit,
        });
    }
    let power = |n1: u64| power_at(spec.alpha, spec.tau, k * (1.0 / n1 as f64 + probe.control_term()));
    if power(MAX_N1) < target_power {
        return Ok(SampleSize::Infeasible {
            reason: format!("target not reached below the search cap n1 = {MAX_N1}"),
            max_power: power(MAX_N1),
        });
    }
    let (mut lo, mut hi) = (1u64, MAX_N1);
    if power(lo) >= target_power {
        return Ok(SampleSize::Feasible { n1: 1, power: power(1) });
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if power(mid) >= target_power {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SampleSize::Feasible { n1: hi, power: power(hi) })
}

/// Treated size of the single-arm design over total size of a 1:1 randomized
/// trial of equal power: `(1 - rho0^2) / 4 * (1 + n1/(gamma n0))`.
pub fn rct_ratio(n1: f64, n0: f64, gamma: f64, rho0: f64) -> f64 {
    (1.0 - rho0 * rho0) / 4.0 * (1.0 + n1 / (gamma * n0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub gamma: f64,
    pub n0_over_n1: f64,
    pub ratio: f64,
}

/// The ratio over a grid of `gamma` and `n0/n1` values.
pub fn ratio_grid(gammas: &[f64], n0_over_n1: &[f64], rho0: f64) -> Vec<RatioRow> {
    let mut rows = Vec::with_capacity(gammas.len() * n0_over_n1.len());
    for &gamma in gammas {
        for &r in n0_over_n1 {
            rows.push(RatioRow { gamma, n0_over_n1: r, ratio: rct_ratio(1.0, r, gamma, rho0) });
        }
    }
    rows
}
