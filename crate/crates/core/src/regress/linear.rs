//! Ordinary and weighted least squares with an intercept.

use nalgebra::{DMatrix, DVector};

use super::Regressor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    /// One coefficient per input column; dropped columns carry 0.
    pub coefficients: DVector<f64>,
    /// Input columns found linearly dependent on earlier columns.
    pub dropped: Vec<usize>,
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(self.coefficients.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }
}

impl Regressor for LinearModel {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.coefficients.len() {
            return Err(Error::DimensionMismatch(format!(
                "linear model has {} inputs, got {}",
                self.coefficients.len(),
                x.ncols()
            )));
        }
        let mut out = x * &self.coefficients;
        out.add_scalar_mut(self.intercept);
        Ok(out)
    }
}

/// Minimizes `sum w_i (y_i - b0 - x_i b)^2` by a QR factorization of
/// `sqrt(w) [1, X]`. Columns are taken in order; a column whose residual
/// after projection on the kept columns is negligible is dropped.
pub fn fit_wls(x: &DMatrix<f64>, y: &[f64], weights: &[f64]) -> Result<LinearModel> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || weights.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} rows, {} responses, {} weights",
            y.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidParameter(
            "weights must be finite and >= 0".into(),
        ));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidParameter("all weights are zero".into()));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite regression input".into(),
        ));
    }

    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        a[(i, 0)] = sw[i];
        for j in 0..p {
            a[(i, j + 1)] = sw[i] * x[(i, j)];
        }
    }
    let b = DVector::from_iterator(n, y.iter().zip(&sw).map(|(y, s)| y * s));

    // Modified Gram-Schmidt with reorthogonalization.
    let mut q: Vec<DVector<f64>> = Vec::new();
    let mut r: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..=p {
        let mut v = a.column(j).into_owned();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut coef = vec![0.0; q.len()];
        for _ in 0..2 {
            for (k, qk) in q.iter().enumerate() {
                let c = qk.dot(&v);
                v.axpy(-c, qk, 1.0);
                coef[k] += c;
            }
        }
        let nv = v.norm();
        if nv <= 1e-9 * norm0 {
            continue;
        }
        coef.push(nv);
        q.push(v / nv);
        r.push(coef);
        kept.push(j);
    }
    if kept.first() != Some(&0) {
        return Err(Error::RankDeficient("intercept column vanished".into()));
    }
    let qtb: Vec<f64> = q.iter().map(|qk| qk.dot(&b)).collect();
    let m = kept.len();
    let mut beta = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = qtb[i];
        for k in i + 1..m {
            s -= r[k][i] * beta[k];
        }
        beta[i] = s / r[i][i];
    }
    let mut coefficients = DVector::zeros(p);
    for (pos, &j) in kept.iter().enumerate().skip(1) {
        coefficients[j - 1] = beta[pos];
    }
    let dropped = (0..p).filter(|j| !kept.contains(&(j + 1))).collect();
    Ok(LinearModel {
        intercept: beta[0],
        coefficients,
        dropped,
    })
}

pub fn fit_ols(x: &DMatrix<f64>, y: &[f64]) -> Result<LinearModel> {
    fit_wls(x, y, &vec![1.0; x.nrows()])
}
