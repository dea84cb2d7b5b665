//! L2-penalized logistic regression fitted by Newton/IRLS.
//!
//! Objective (averaged over rows, intercept unpenalized):
//! `L(b0, b) = mean(softplus(eta) - y * eta) + (lambda / 2) * |b|^2`, `eta = b0 + x'b`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Dense};
use crate::stats::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub grad_sup_norm: f64,
    pub converged: bool,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn linear(x: &[f64], intercept: f64, coef: &[f64]) -> f64 {
    intercept + x.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>()
}

/// Parameters are packed as `[intercept, coef...]`.
pub fn objective(x: &Dense, y: &[bool], lambda: f64, theta: &[f64]) -> f64 {
    let n = x.n_rows() as f64;
    let mut loss = 0.0;
    for i in 0..x.n_rows() {
        let eta = linear(x.row(i), theta[0], &theta[1..]);
        loss += softplus(eta) - if y[i] { eta } else { 0.0 };
    }
    loss / n + 0.5 * lambda * theta[1..].iter().map(|b| b * b).sum::<f64>()
}

pub fn gradient(x: &Dense, y: &[bool], lambda: f64, theta: &[f64]) -> Vec<f64> {
    let p = x.n_cols();
    let n = x.n_rows() as f64;
    let mut g = vec![0.0; p + 1];
    for i in 0..x.n_rows() {
        let row = x.row(i);
        let r = sigmoid(linear(row, theta[0], &theta[1..])) - if y[i] { 1.0 } else { 0.0 };
        g[0] += r;
        for j in 0..p {
            g[j + 1] += r * row[j];
        }
    }
    for j in 0..=p {
        g[j] /= n;
        if j > 0 {
            g[j] += lambda * theta[j];
        }
    }
    g
}

/// Objective, gradient and Hessian at one parameter vector.
struct NewtonTerms {
    loss: f64,
    grad: Vec<f64>,
    hess: DMatrix<f64>,
}

/// Computes [`NewtonTerms`] in one pass over the rows, sharing a single
/// exponential between the loss and the fitted probability.
fn newton_terms(x: &Dense, y: &[bool], lambda: f64, theta: &[f64]) -> NewtonTerms {
    let p = x.n_cols();
    let n = x.n_rows() as f64;
    let m = p + 1;
    let mut loss = 0.0;
    let mut g = vec![0.0; m];
    // lower triangle, row-major
    let mut tri = vec![0.0; m * (m + 1) / 2];
    let mut z = vec![1.0; m];
    for (row, &yi) in (0..x.n_rows()).map(|i| x.row(i)).zip(y) {
        z[1..].copy_from_slice(row);
        let eta = linear(row, theta[0], &theta[1..]);
        let e = (-eta.abs()).exp();
        let mu = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        loss += eta.max(0.0) + e.ln_1p() - if yi { eta } else { 0.0 };
        let r = mu - if yi { 1.0 } else { 0.0 };
        let w = mu * (1.0 - mu);
        let mut off = 0;
        for (a, &za) in z.iter().enumerate() {
            g[a] += r * za;
            let wa = w * za;
            for (t, &zb) in tri[off..=off + a].iter_mut().zip(&z) {
                *t += wa * zb;
            }
            off += a + 1;
        }
    }
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut k = 0;
    for a in 0..m {
        for b in 0..=a {
            h[(a, b)] = tri[k] / n;
            h[(b, a)] = h[(a, b)];
            k += 1;
        }
        g[a] /= n;
        if a > 0 {
            g[a] += lambda * theta[a];
            h[(a, a)] += lambda;
        }
    }
    let penalty = 0.5 * lambda * theta[1..].iter().map(|b| b * b).sum::<f64>();
    NewtonTerms { loss: loss / n + penalty, grad: g, hess: h }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn fit_logistic(x: &Dense, y: &[bool], lambda: f64, opts: IrlsOptions) -> Result<LogisticFit> {
    fit_logistic_from(x, y, lambda, opts, None)
}

/// As [`fit_logistic`], starting Newton from `init` (packed `[intercept,
/// coef...]`) instead of the intercept-only solution.
pub fn fit_logistic_from(
    x: &Dense,
    y: &[bool],
    lambda: f64,
    opts: IrlsOptions,
    init: Option<&[f64]>,
) -> Result<LogisticFit> {
    let p = x.n_cols();
    if x.n_rows() == 0 || y.len() != x.n_rows() {
        return Err(Error::InvalidInput("logistic fit needs aligned, non-empty data".into()));
    }
    let mut theta = match init {
        Some(t) if t.len() == p + 1 && t.iter().all(|v| v.is_finite()) => t.to_vec(),
        _ => {
            let frac = y.iter().filter(|&&a| a).count() as f64 / y.len() as f64;
            let mut t = vec![0.0; p + 1];
            if frac > 0.0 && frac < 1.0 {
                t[0] = (frac / (1.0 - frac)).ln();
            }
            t
        }
    };
    let mut terms = newton_terms(x, y, lambda, &theta);
    let mut iterations = 0;

    while sup_norm(&terms.grad) > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let loss = terms.loss;
        let step = solve_spd(terms.hess.clone(), DVector::from_column_slice(&terms.grad))?;
        let accepts = |l: f64| l.is_finite() && l <= loss + 1e-14 * loss.abs().max(1.0);
        let shifted = |t: f64| -> Vec<f64> { theta.iter().zip(step.iter()).map(|(a, d)| a - t * d).collect() };
        // the full step almost always succeeds; shorter steps only need the loss
        let full = shifted(1.0);
        let next = newton_terms(x, y, lambda, &full);
        // near the optimum the loss change drops below summation rounding, so
        // a flat loss with a smaller gradient also counts as progress
        let flat = next.loss.is_finite() && next.loss <= loss + 1e-10 * loss.abs().max(1.0);
        if accepts(next.loss) || (flat && sup_norm(&next.grad) < sup_norm(&terms.grad)) {
            theta = full;
            terms = next;
            continue;
        }
        let mut t = 0.5;
        let mut accepted = None;
        for _ in 1..40 {
            let cand = shifted(t);
            if accepts(objective(x, y, lambda, &cand)) {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(cand) => {
                terms = newton_terms(x, y, lambda, &cand);
                theta = cand;
            }
            None => {
                if !loss.is_finite() {
                    return Err(Error::Divergence { iterations, last_loss: loss, last_coefficients: theta });
                }
                // no decrease possible at machine precision
                break;
            }
        }
    }
    let loss = terms.loss;
    if !loss.is_finite() || theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iterations, last_loss: loss, last_coefficients: theta });
    }
    let grad_sup_norm = sup_norm(&terms.grad);
    Ok(LogisticFit {
        intercept: theta[0],
        coef: theta[1..].to_vec(),
        lambda,
        iterations,
        grad_sup_norm,
        converged: grad_sup_norm <= opts.tol,
    })
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        linear(x, self.intercept, &self.coef)
    }

    pub fn theta(&self) -> Vec<f64> {
        std::iter::once(self.intercept).chain(self.coef.iter().copied()).collect()
    }
}

/// True when the fitted linear predictor separates the classes perfectly.
pub fn is_separated(x: &Dense, y: &[bool], fit: &LogisticFit) -> bool {
    let mut min_pos = f64::INFINITY;
    let mut max_neg = f64::NEG_INFINITY;
    for i in 0..x.n_rows() {
        let eta = fit.linear_predictor(x.row(i));
        if y[i] {
            min_pos = min_pos.min(eta);
        } else {
            max_neg = max_neg.max(eta);
        }
    }
    min_pos > max_neg
}
