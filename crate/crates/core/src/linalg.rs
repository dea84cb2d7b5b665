//! Dense row-major storage and the ridge solver shared by the imputer and
//! the ridge outcome regressor.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Row-major dense matrix of fully observed features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, data: vec![0.0; n_rows * n_cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { n_rows: rows.len(), n_cols, data }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n_cols + j] = v;
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dense {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Dense { n_rows: rows.len(), n_cols: self.n_cols, data }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Dense {
        let mut data = Vec::with_capacity(self.n_rows * cols.len());
        for i in 0..self.n_rows {
            let row = self.row(i);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Dense { n_rows: self.n_rows, n_cols: cols.len(), data }
    }
}

/// Solves the symmetric positive definite system `a x = b`, falling back to
/// LU when Cholesky fails.
pub fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    a.lu().solve(&b).ok_or_else(|| Error::Numerical("singular linear system".into()))
}

/// Per-column centering and scaling. Zero-variance columns keep scale 1 and
/// are flagged so callers can drop them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub constant: Vec<bool>,
}

pub const CONSTANT_SD: f64 = 1e-12;

impl ColumnScaling {
    pub fn fit(x: &Dense) -> Self {
        let (n, p) = (x.n_rows(), x.n_cols());
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        let mut constant = vec![false; p];
        for j in 0..p {
            let m = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (x.get(i, j) - m).powi(2)).sum::<f64>() / n as f64;
            center[j] = m;
            let sd = v.sqrt();
            if sd > CONSTANT_SD * (1.0 + m.abs()) {
                scale[j] = sd;
            } else {
                constant[j] = true;
            }
        }
        Self { center, scale, constant }
    }

    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = if self.constant[j] { 0.0 } else { (row[j] - self.center[j]) / self.scale[j] };
        }
    }
}

/// Ridge regression on standardized features with an unpenalized intercept:
/// minimizes `sum (y - b0 - z'b)^2 + penalty * |b|^2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RidgeFit {
    pub scaling: ColumnScaling,
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl RidgeFit {
    pub fn fit(x: &Dense, y: &[f64], penalty: f64) -> Result<Self> {
        let (n, p) = (x.n_rows(), x.n_cols());
        if n == 0 || y.len() != n {
            return Err(Error::InvalidInput("ridge fit needs aligned, non-empty data".into()));
        }
        let scaling = ColumnScaling::fit(x);
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        let mut z = vec![0.0; p];
        for i in 0..n {
            scaling.apply(x.row(i), &mut z);
            let r = y[i] - y_mean;
            for a in 0..p {
                rhs[a] += z[a] * r;
                for b in 0..=a {
                    gram[(a, b)] += z[a] * z[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
            // constant columns are all-zero after scaling; pin their coefficient
            gram[(a, a)] += if scaling.constant[a] { 1.0 } else { penalty };
        }
        let coef = if p == 0 { Vec::new() } else { solve_spd(gram, rhs)?.iter().copied().collect() };
        Ok(Self { scaling, coef, intercept: y_mean })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut acc = self.intercept;
        for j in 0..row.len() {
            if !self.scaling.constant[j] {
                acc += self.coef[j] * (row[j] - self.scaling.center[j]) / self.scaling.scale[j];
            }
        }
        acc
    }
}
