//! End-to-end estimation on one pooled sample: nuisance fits, overlap
//! trimming, point estimates and variances.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::PooledSample;
use crate::error::{Error, Result};
use crate::estimators::{
    aipw_att, ipw_att, om_att, psm_att, trim_overlap, AttEstimate, MatchingConfig, Method, OverlapRegion,
};
use crate::inference::{
    asymptotic_variance, bootstrap_variance, KappaSource, PsmForm, ResamplingSummary, VarianceComponents,
};
use crate::nuisance::{
    fit_pooled_outcome, fit_propensity_grouped, CrossFitPlan, OutcomeConfig, PooledOutcome, PropensityConfig,
    PropensityFit,
};

/// Which variance is reported as `AttEstimate::variance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    /// Closed-form asymptotic variance with plug-in components.
    #[default]
    Formula,
    /// The estimator's own sample-moment variance (influence function for AIPW).
    Plugin,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub methods: Vec<Method>,
    #[serde(default)]
    pub crossfit: CrossFitPlan,
    #[serde(default)]
    pub propensity: PropensityConfig,
    #[serde(default)]
    pub outcome: Option<OutcomeConfig>,
    #[serde(default)]
    pub matching: MatchingConfig,
    /// Restrict IPW and AIPW to the propensity overlap region.
    #[serde(default = "default_true")]
    pub trim_overlap: bool,
    /// Also restrict matching to the overlap region.
    #[serde(default)]
    pub trim_psm: bool,
    #[serde(default)]
    pub variance: VarianceSource,
    #[serde(default)]
    pub kappa_source: KappaSource,
    #[serde(default)]
    pub psm_form: PsmForm,
}

impl PipelineSpec {
    pub fn new(methods: Vec<Method>) -> Self {
        Self {
            methods,
            crossfit: CrossFitPlan::default(),
            propensity: PropensityConfig::default(),
            outcome: Some(OutcomeConfig::default()),
            matching: MatchingConfig::default(),
            trim_overlap: true,
            trim_psm: false,
            variance: VarianceSource::default(),
            kappa_source: KappaSource::default(),
            psm_form: PsmForm::default(),
        }
    }

    pub fn needs_propensity(&self) -> bool {
        self.methods.iter().any(|m| m.needs_propensity())
    }

    /// An outcome model is fitted when a method needs it, or when IPW runs and
    /// an outcome block is configured (it feeds the IPW variance).
    pub fn needs_outcome(&self) -> bool {
        self.methods.iter().any(|m| m.needs_outcome())
            || (self.outcome.is_some() && self.methods.contains(&Method::Ipw))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("no estimators requested".into()));
        }
        if self.methods.iter().any(|m| m.needs_outcome()) && self.outcome.is_none() {
            return Err(Error::MissingComponent("outcome"));
        }
        Ok(())
    }

    pub fn only(&self, method: Method) -> Self {
        Self { methods: vec![method], ..self.clone() }
    }
}

/// Fitted or supplied nuisance values aligned with the sample rows.
#[derive(Debug, Clone, Default)]
pub struct Nuisances {
    pub e_hat: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub rho0: Option<f64>,
    pub propensity: Option<PropensityFit>,
    pub outcome: Option<PooledOutcome>,
}

impl Nuisances {
    /// Nuisance values restricted to (or repeated along) `rows`.
    pub fn select(&self, rows: &[usize]) -> Nuisances {
        Nuisances {
            e_hat: self.e_hat.as_ref().map(|e| rows.iter().map(|&i| e[i]).collect()),
            mu0: self.mu0.as_ref().map(|m| rows.iter().map(|&i| m[i]).collect()),
            rho0: self.rho0,
            propensity: None,
            outcome: None,
        }
    }

    pub fn summary(&self) -> Value {
        json!({
            "propensity": self.propensity.as_ref().map(|p| json!({
                "lambda": p.model.fit.lambda,
                "intercept": p.model.fit.intercept,
                "coefficients_standardized": p.model.fit.coef,
                "features": p.model.feature_names,
                "dropped_features": p.model.dropped_features,
                "irls_iterations": p.model.fit.iterations,
                "irls_converged": p.model.fit.converged,
                "fold_lambdas": p.fold_lambdas,
                "folds": p.folds,
                "warnings": p.warnings,
            })),
            "outcome": self.outcome.as_ref().map(|o| o.summary()),
            "rho0": self.rho0,
        })
    }
}

pub fn fit_nuisances(
    sample: &PooledSample,
    groups: Option<&[String]>,
    spec: &PipelineSpec,
    seed: u64,
) -> Result<Nuisances> {
    spec.validate()?;
    let plan = CrossFitPlan { seed, ..spec.crossfit.clone() };
    let groups = groups.unwrap_or(sample.subject_ids());
    let mut out = Nuisances::default();
    if spec.needs_propensity() {
        let fit = fit_propensity_grouped(sample.covariates(), sample.treated(), groups, &plan, &spec.propensity)?;
        out.e_hat = Some(fit.oof.clone());
        out.propensity = Some(fit);
    }
    if spec.needs_outcome() {
        let config = spec.outcome.as_ref().ok_or(Error::MissingComponent("outcome"))?;
        let fit = fit_pooled_outcome(sample, Some(groups), &plan, config)?;
        out.mu0 = Some(fit.mu0.clone());
        out.rho0 = Some(fit.rho0);
        out.outcome = Some(fit);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub estimates: Vec<AttEstimate>,
    pub overlap: Option<OverlapRegion>,
    pub components: VarianceComponents,
}

impl EstimationReport {
    pub fn get(&self, method: Method) -> Option<&AttEstimate> {
        self.estimates.iter().find(|e| e.method == method)
    }
}

fn finish(est: &mut AttEstimate, formula: Result<f64>, source: VarianceSource, comps: &VarianceComponents) {
    let plugin = est.variance;
    est.diagnostics.insert("plugin_variance".into(), json!(plugin));
    match formula {
        Ok(v) => {
            est.diagnostics.insert("formula_variance".into(), json!(v));
            if source == VarianceSource::Formula {
                est.set_variance(v);
            }
        }
        Err(e) => {
            est.diagnostics.insert("formula_variance_error".into(), json!(e.to_string()));
        }
    }
    if !comps.notes.is_empty() {
        est.diagnostics.insert("variance_notes".into(), json!(comps.notes));
    }
}

fn propensity(n: &Nuisances) -> Result<&[f64]> {
    n.e_hat.as_deref().ok_or(Error::MissingComponent("propensity"))
}

fn outcome(n: &Nuisances) -> Result<&[f64]> {
    n.mu0.as_deref().ok_or(Error::MissingComponent("outcome"))
}

/// Runs every requested estimator on already-fitted nuisances.
pub fn run_estimators(sample: &PooledSample, nuis: &Nuisances, spec: &PipelineSpec) -> Result<EstimationReport> {
    let full_comps = {
        let mut c = VarianceComponents::estimate(
            sample,
            nuis.e_hat.as_deref(),
            nuis.mu0.as_deref(),
            nuis.rho0,
            spec.kappa_source,
        );
        c.psm_form = spec.psm_form;
        c
    };
    let trimmed = match (&nuis.e_hat, spec.trim_overlap || spec.trim_psm) {
        (Some(e), true) => {
            let (rows, region) = trim_overlap(sample, e)?;
            let sub = sample.subset(&rows)?;
            let sub_nuis = nuis.select(&rows);
            let mut comps = VarianceComponents::estimate(
                &sub,
                sub_nuis.e_hat.as_deref(),
                sub_nuis.mu0.as_deref(),
                nuis.rho0,
                spec.kappa_source,
            );
            comps.psm_form = spec.psm_form;
            Some((sub, sub_nuis, comps, region))
        }
        _ => None,
    };
    let weighting_view = |trim: bool| match (&trimmed, trim) {
        (Some((s, n, c, _)), true) => (s, n, c),
        _ => (sample, nuis, &full_comps),
    };

    let mut estimates = Vec::with_capacity(spec.methods.len());
    for &method in &spec.methods {
        let est = match method {
            Method::Psm => {
                let (s, n, c) = weighting_view(spec.trim_psm);
                let (mut est, m) = psm_att(s, propensity(n)?, &spec.matching)?;
                let comps = VarianceComponents { n1: m.pairs.len(), match_reuse: Some(m.reuse_factor()), ..c.clone() };
                finish(&mut est, asymptotic_variance(method, &comps), spec.variance, &comps);
                est
            }
            Method::Ipw => {
                let (s, n, c) = weighting_view(spec.trim_overlap);
                let mut est = ipw_att(s, propensity(n)?)?;
                finish(&mut est, asymptotic_variance(method, c), spec.variance, c);
                est
            }
            Method::Om => {
                let mut est = om_att(sample, outcome(nuis)?)?;
                finish(&mut est, asymptotic_variance(method, &full_comps), spec.variance, &full_comps);
                est
            }
            Method::Aipw => {
                let (s, n, c) = weighting_view(spec.trim_overlap);
                let mut est = aipw_att(s, propensity(n)?, outcome(n)?)?;
                finish(&mut est, asymptotic_variance(method, c), spec.variance, c);
                est
            }
        };
        estimates.push(est);
    }
    Ok(EstimationReport {
        estimates,
        overlap: trimmed.as_ref().map(|t| t.3),
        components: trimmed.map_or(full_comps, |t| t.2),
    })
}

/// Fits nuisances and runs the estimators in one call.
pub fn estimate(sample: &PooledSample, spec: &PipelineSpec, seed: u64) -> Result<(Nuisances, EstimationReport)> {
    let nuis = fit_nuisances(sample, None, spec, seed)?;
    let report = run_estimators(sample, &nuis, spec)?;
    Ok((nuis, report))
}

/// Stratified bootstrap variance of one method. With `refit`, nuisances are
/// re-estimated on every replicate; otherwise the supplied values are carried
/// along with the resampled rows.
pub fn bootstrap_method(
    sample: &PooledSample,
    nuis: &Nuisances,
    spec: &PipelineSpec,
    method: Method,
    replicates: usize,
    refit: bool,
    seed: u64,
) -> Result<ResamplingSummary> {
    let single = spec.only(method);
    bootstrap_variance(sample, replicates, seed, |rep| {
        let n = if refit {
            fit_nuisances(&rep.sample, Some(&rep.groups), &single, rep.seed)?
        } else {
            nuis.select(&rep.rows)
        };
        let report = run_estimators(&rep.sample, &n, &single)?;
        Ok(report.estimates[0].tau_hat)
    })
}

/// Default refit policy: nuisances are refit for PSM, IPW and OM and held
/// fixed for AIPW.
pub fn default_refit(method: Method) -> bool {
    method != Method::Aipw
}
