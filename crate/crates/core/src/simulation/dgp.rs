//! Synthetic pooled samples with known propensities and potential outcomes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateTable, PooledSample};
use crate::error::{Error, Result};
use crate::stats::{derive_seed, rng_for, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    None,
    /// Adds `sum_j q_j x_j^2` to the control mean.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Assignment {
    /// Fixed arm sizes; covariates drawn from two Gaussians sharing a covariance.
    TwoPopulation { n1: usize, n0: usize },
    /// One Gaussian population; membership drawn from `sigmoid(intercept + coef'x)`.
    Logistic { coef: Vec<f64>, intercept: f64, n: usize },
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub d: usize,
    /// Treated minus control covariate means (two-population only).
    #[serde(default)]
    pub mean_shift: Vec<f64>,
    /// Control covariate mean; zeros when empty.
    #[serde(default)]
    pub control_mean: Vec<f64>,
    /// Shared covariance; identity when absent.
    #[serde(default)]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub outcome_intercept: f64,
    pub outcome_coef: Vec<f64>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    /// Quadratic coefficients; default to `outcome_coef`.
    #[serde(default)]
    pub quadratic_coef: Option<Vec<f64>>,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    pub tau: f64,
    /// Effect modification: `tau(x) = tau + h'x`.
    #[serde(default)]
    pub effect_coef: Option<Vec<f64>>,
    pub assignment: Assignment,
    #[serde(default)]
    pub seed: u64,
}

/// One draw with the quantities an analyst never sees.
#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub sample: PooledSample,
    pub true_e: Vec<f64>,
    /// `E[Y(0) | X]` per row.
    pub true_mu0: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Validated spec with the Cholesky factor and precision-derived propensity.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    chol: DMatrix<f64>,
    control_mean: DVector<f64>,
    shift: DVector<f64>,
    /// Two-population log-odds slope `Sigma^{-1} delta`.
    odds_slope: DVector<f64>,
    odds_offset: f64,
}

fn check_len(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::InvalidInput(format!("{name} has length {} but d = {d}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl DgpSpec {
    /// Linear Gaussian two-population spec with identity covariance.
    pub fn two_population(shift: Vec<f64>, coef: Vec<f64>, noise_sd: f64, tau: f64, n1: usize, n0: usize) -> Self {
        DgpSpec {
            d: coef.len(),
            mean_shift: shift,
            control_mean: Vec::new(),
            covariance: None,
            outcome_intercept: 0.0,
            outcome_coef: coef,
            nonlinearity: Nonlinearity::None,
            quadratic_coef: None,
            noise_sd,
            tau,
            effect_coef: None,
            assignment: Assignment::TwoPopulation { n1, n0 },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    fn quadratic(&self) -> &[f64] {
        self.quadratic_coef.as_deref().unwrap_or(&self.outcome_coef)
    }

    pub(crate) fn prepare(&self) -> Result<Prepared> {
        let d = self.d;
        if d == 0 {
            return Err(Error::InvalidInput("d must be at least 1".into()));
        }
        check_len("outcome_coef", &self.outcome_coef, d)?;
        if let Some(q) = &self.quadratic_coef {
            check_len("quadratic_coef", q, d)?;
        }
        if let Some(h) = &self.effect_coef {
            check_len("effect_coef", h, d)?;
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidInput(format!("noise_sd must be non-negative, got {}", self.noise_sd)));
        }
        if !self.tau.is_finite() || !self.outcome_intercept.is_finite() {
            return Err(Error::InvalidInput("tau and outcome_intercept must be finite".into()));
        }
        let zeros = vec![0.0; d];
        let control_mean = if self.control_mean.is_empty() { &zeros } else { &self.control_mean };
        check_len("control_mean", control_mean, d)?;
        let cov = match &self.covariance {
            None => DMatrix::identity(d, d),
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidInput(format!("covariance must be {d}x{d}")));
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
        };
        if (0..d).any(|i| (0..i).any(|j| (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * (1.0 + cov[(i, j)].abs()))) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        let chol =
            cov.clone().cholesky().ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?;
        let shift = match &self.assignment {
            Assignment::TwoPopulation { n1, n0 } => {
                if *n1 < 2 || *n0 < 2 {
                    return Err(Error::InvalidInput(format!("need n1, n0 >= 2, got {n1}, {n0}")));
                }
                let s = if self.mean_shift.is_empty() { &zeros } else { &self.mean_shift };
                check_len("mean_shift", s, d)?;
                DVector::from_column_slice(s)
            }
            Assignment::Logistic { coef, intercept, n } => {
                check_len("assignment.coef", coef, d)?;
                if !intercept.is_finite() || *n < 4 {
                    return Err(Error::InvalidInput("logistic assignment needs a finite intercept and n >= 4".into()));
                }
                if !self.mean_shift.is_empty() {
                    return Err(Error::InvalidInput("mean_shift applies only to two-population assignment".into()));
                }
                DVector::zeros(d)
            }
        };
        let mu0 = DVector::from_column_slice(control_mean);
        let (odds_slope, odds_offset) = match &self.assignment {
            Assignment::TwoPopulation { n1, n0 } => {
                let slope = chol.solve(&shift);
                // log-odds at x: log(n1/n0) + slope'(x - mu0 - shift/2)
                let centre = &mu0 + &shift * 0.5;
                let offset = (*n1 as f64 / *n0 as f64).ln() - slope.dot(&centre);
                (slope, offset)
            }
            Assignment::Logistic { coef, intercept, .. } => (DVector::from_column_slice(coef), *intercept),
        };
        Ok(Prepared { chol: chol.l(), control_mean: mu0, shift, odds_slope, odds_offset })
    }

    /// `E[Y(0) | x]`.
    pub fn control_mean_at(&self, x: &[f64]) -> f64 {
        let mut m = self.outcome_intercept + dot(&self.outcome_coef, x);
        if self.nonlinearity == Nonlinearity::Quadratic {
            m += self.quadratic().iter().zip(x).map(|(q, v)| q * v * v).sum::<f64>();
        }
        m
    }

    pub fn effect_at(&self, x: &[f64]) -> f64 {
        self.tau + self.effect_coef.as_deref().map_or(0.0, |h| dot(h, x))
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.d).map(|j| format!("x{j}")).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Prepared {
    fn draw_x(&self, rng: &mut ChaCha8Rng, treated: bool) -> Vec<f64> {
        let d = self.control_mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let mut x = &self.chol * z + &self.control_mean;
        if treated {
            x += &self.shift;
        }
        x.as_slice().to_vec()
    }

    fn propensity(&self, x: &[f64]) -> f64 {
        sigmoid(self.odds_offset + dot(self.odds_slope.as_slice(), x))
    }
}

/// Draws one pooled sample using `spec.seed`.
pub fn generate_pooled(spec: &DgpSpec) -> Result<SimulatedSample> {
    generate_with_seed(spec, spec.seed)
}

/// Draws one pooled sample. Treated rows come first in two-population mode.
pub fn generate_with_seed(spec: &DgpSpec, seed: u64) -> Result<SimulatedSample> {
    let prep = spec.prepare()?;
    let mut rng = rng_for(seed, 0);
    let mut xs = Vec::new();
    let mut treated = Vec::new();
    match &spec.assignment {
        Assignment::TwoPopulation { n1, n0 } => {
            for i in 0..n1 + n0 {
                let a = i < *n1;
                xs.push(prep.draw_x(&mut rng, a));
                treated.push(a);
            }
        }
        Assignment::Logistic { n, .. } => {
            for _ in 0..*n {
                let x = prep.draw_x(&mut rng, false);
                let a = rng.random::<f64>() < prep.propensity(&x);
                xs.push(x);
                treated.push(a);
            }
        }
    }
    let n = xs.len();
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut true_mu0 = Vec::with_capacity(n);
    let mut true_e = Vec::with_capacity(n);
    for x in &xs {
        let m = spec.control_mean_at(x);
        let eps: f64 = rng.sample(StandardNormal);
        let base = m + spec.noise_sd * eps;
        true_mu0.push(m);
        y0.push(base);
        y1.push(base + spec.effect_at(x));
        true_e.push(prep.propensity(x));
    }
    let observed: Vec<f64> = (0..n).map(|i| if treated[i] { y1[i] } else { y0[i] }).collect();
    let columns = spec
        .covariate_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| (name, xs.iter().map(|x| Some(x[j])).collect()))
        .collect();
    let table = CovariateTable::new(columns)?;
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let sample = PooledSample::new(table, treated, observed, ids)?;
    Ok(SimulatedSample { sample, true_e, true_mu0, y0, y1 })
}

/// Closed-form ATT when the treated covariate mean is known: always for
/// constant effects and for two-population designs.
pub fn analytic_att(spec: &DgpSpec) -> Option<f64> {
    let Some(h) = &spec.effect_coef else {
        return Some(spec.tau);
    };
    match &spec.assignment {
        Assignment::TwoPopulation { .. } => {
            let d = spec.d;
            let mean: Vec<f64> = (0..d)
                .map(|j| {
                    spec.control_mean.get(j).copied().unwrap_or(0.0) + spec.mean_shift.get(j).copied().unwrap_or(0.0)
                })
                .collect();
            Some(spec.tau + dot(h, &mean))
        }
        Assignment::Logistic { .. } => None,
    }
}

/// Brute-force `E[Y(1) - Y(0) | A = 1]` over `n_oracle` simulated subjects
/// (treated draws for two-population designs, pooled draws otherwise).
pub fn oracle_att(spec: &DgpSpec, n_oracle: usize) -> Result<f64> {
    if n_oracle < 100_000 {
        return Err(Error::InvalidInput(format!("oracle needs at least 1e5 draws, got {n_oracle}")));
    }
    let prep = spec.prepare()?;
    if spec.effect_coef.is_none() {
        // Y(1) - Y(0) is tau for every subject
        return Ok(spec.tau);
    }
    let mut rng = rng_for(derive_seed(spec.seed, 0x0AC1E), 0);
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..n_oracle {
        let (x, a) = match &spec.assignment {
            Assignment::TwoPopulation { .. } => (prep.draw_x(&mut rng, true), true),
            Assignment::Logistic { .. } => {
                let x = prep.draw_x(&mut rng, false);
                let a = rng.random::<f64>() < prep.propensity(&x);
                (x, a)
            }
        };
        if a {
            // the noise cancels in Y(1) - Y(0)
            sum += spec.effect_at(&x);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateCohort("oracle draw produced no treated subjects".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean;

    fn base() -> DgpSpec {
        DgpSpec::two_population(vec![0.0, 0.0], vec![1.0, -0.5], 1.0, 0.0, 2000, 2000)
    }

    #[test]
    fn null_shift_and_effect_gives_equal_arm_means() {
        let s = generate_pooled(&base()).unwrap();
        let y = s.sample.outcome();
        let a = s.sample.treated();
        let m1 = mean(&(0..y.len()).filter(|&i| a[i]).map(|i| y[i]).collect::<Vec<_>>());
        let m0 = mean(&(0..y.len()).filter(|&i| !a[i]).map(|i| y[i]).collect::<Vec<_>>());
        // sd of each outcome is about 1.1, so the difference has sd about 0.035
        assert!((m1 - m0).abs() < 0.15);
        for e in &s.true_e {
            assert!((e - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_effect_is_exact_per_subject() {
        let spec = DgpSpec { noise_sd: 0.0, tau: 2.0, ..base() };
        let s = generate_pooled(&spec).unwrap();
        for i in s.sample.treated_indices() {
            assert_eq!(s.sample.outcome()[i], s.y0[i] + 2.0);
            assert!((s.sample.outcome()[i] - s.y0[i] - 2.0).abs() < 1e-12);
            assert_eq!(s.y0[i], s.true_mu0[i]);
        }
    }

    #[test]
    fn logistic_assignment_rate_matches_intercept() {
        let spec = DgpSpec {
            mean_shift: vec![],
            assignment: Assignment::Logistic { coef: vec![0.0, 0.0], intercept: -1.0, n: 20_000 },
            ..base()
        };
        let s = generate_pooled(&spec).unwrap();
        let frac = s.sample.n1() as f64 / s.sample.n() as f64;
        // binomial sd is about 0.003
        assert!((frac - sigmoid(-1.0)).abs() < 0.015);
    }

    #[test]
    fn two_population_propensity_is_the_bayes_posterior() {
        let spec = DgpSpec {
            mean_shift: vec![1.0, 0.0],
            covariance: Some(vec![vec![2.0, 0.5], vec![0.5, 1.0]]),
            assignment: Assignment::TwoPopulation { n1: 100, n0: 300 },
            ..base()
        };
        let prep = spec.prepare().unwrap();
        let x = [0.3, -0.7];
        // direct density ratio of the two Gaussians
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let inv = sigma.try_inverse().unwrap();
        let q = |m: [f64; 2]| {
            let v = DVector::from_column_slice(&[x[0] - m[0], x[1] - m[1]]);
            (v.transpose() * &inv * &v)[(0, 0)]
        };
        let log_ratio = -0.5 * q([1.0, 0.0]) + 0.5 * q([0.0, 0.0]);
        let expected = sigmoid((100.0f64 / 300.0).ln() + log_ratio);
        assert!((prep.propensity(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let spec = DgpSpec { covariance: Some(vec![vec![1.0, 2.0], vec![2.0, 1.0]]), ..base() };
        assert!(generate_pooled(&spec).is_err());
        let asym = DgpSpec { covariance: Some(vec![vec![1.0, 0.2], vec![0.0, 1.0]]), ..base() };
        assert!(asym.validate().is_err());
        assert!(DgpSpec { noise_sd: -1.0, ..base() }.validate().is_err());
    }

    #[test]
    fn oracle_constant_and_null_effects() {
        let spec = DgpSpec { tau: 1.0, ..base() };
        assert_eq!(oracle_att(&spec, 100_000).unwrap(), 1.0);
        assert_eq!(oracle_att(&base(), 100_000).unwrap(), 0.0);
        assert!(oracle_att(&spec, 10).is_err());
    }

    #[test]
    fn oracle_heterogeneous_effect_matches_treated_mean() {
        let spec = DgpSpec { mean_shift: vec![0.5, 0.0], effect_coef: Some(vec![1.0, 0.0]), ..base() };
        assert!((analytic_att(&spec).unwrap() - 0.5).abs() < 1e-15);
        // sd of the brute-force mean is 1e-3
        let brute = oracle_att(&spec, 1_000_000).unwrap();
        assert!((brute - 0.5).abs() < 5e-3, "{brute}");
    }

    #[test]
    fn heterogeneous_logistic_oracle_uses_brute_force() {
        let spec = DgpSpec {
            mean_shift: vec![],
            effect_coef: Some(vec![1.0, 0.0]),
            assignment: Assignment::Logistic { coef: vec![1.0, 0.0], intercept: 0.0, n: 100 },
            ..base()
        };
        assert!(analytic_att(&spec).is_none());
        // E[X1 | A=1] for X1 ~ N(0,1), P(A|x) = sigmoid(x1) is about 0.4132
        let v = oracle_att(&spec, 400_000).unwrap();
        assert!((v - 0.4132).abs() < 0.01, "{v}");
    }

    #[test]
    fn same_seed_same_draw() {
        let a = generate_with_seed(&base(), 9).unwrap();
        let b = generate_with_seed(&base(), 9).unwrap();
        assert_eq!(a.sample, b.sample);
        let c = generate_with_seed(&base(), 10).unwrap();
        assert_ne!(a.sample.outcome(), c.sample.outcome());
    }
}
