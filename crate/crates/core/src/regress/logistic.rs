//! Logistic regression fitted by Newton-Raphson (IRLS).
//!
//! Supports fractional responses in `[0, 1]`, per-row sample weights, a fixed
//! offset and an optional intercept. Columns are rescaled internally by their
//! root mean square, and linearly dependent columns are dropped before the
//! first iteration (their coefficients are reported as 0).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const COEF_TOL: f64 = 1e-8;
const LL_TOL: f64 = 1e-10;
/// Linear predictors beyond this magnitude indicate (quasi-)separation.
const SEPARATION_ETA: f64 = 30.0;
/// Keeps predicted probabilities strictly inside (0, 1).
const ETA_CLAMP: f64 = 35.0;

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub intercept: Option<f64>,
    /// One coefficient per input column; dropped columns carry 0.
    pub coefficients: DVector<f64>,
    /// Standard errors from the inverse information; NaN for dropped columns.
    pub standard_errors: DVector<f64>,
    pub intercept_standard_error: Option<f64>,
    pub dropped: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when some linear predictor exceeded the separation threshold.
    pub separated: bool,
    pub log_likelihood: f64,
}

impl LogisticModel {
    pub fn linear_predictor(
        &self,
        x: &DMatrix<f64>,
        offset: Option<&[f64]>,
    ) -> Result<DVector<f64>> {
        if x.ncols() != self.coefficients.len() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} coefficients, input has {} columns",
                self.coefficients.len(),
                x.ncols()
            )));
        }
        let mut eta = x * &self.coefficients;
        if let Some(b0) = self.intercept {
            eta.add_scalar_mut(b0);
        }
        if let Some(off) = offset {
            if off.len() != eta.len() {
                return Err(Error::DimensionMismatch("offset length".into()));
            }
            for (e, o) in eta.iter_mut().zip(off) {
                *e += o;
            }
        }
        Ok(eta)
    }

    /// Probabilities, strictly inside (0, 1).
    pub fn predict_proba(&self, x: &DMatrix<f64>, offset: Option<&[f64]>) -> Result<DVector<f64>> {
        Ok(self
            .linear_predictor(x, offset)?
            .map(|e| expit(e.clamp(-ETA_CLAMP, ETA_CLAMP))))
    }
}

/// Indices of columns that are linearly independent of the columns before
/// them (modified Gram-Schmidt with one reorthogonalization pass).
pub(crate) fn independent_columns(a: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let n = a.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..a.ncols() {
        let col = a.column(j).into_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 || !norm0.is_finite() {
            continue;
        }
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let r = q.dot(&v);
                v.axpy(-r, q, 1.0);
            }
        }
        let nv = v.norm();
        if nv > rel_tol * norm0 && n > basis.len() {
            basis.push(v / nv);
            keep.push(j);
        }
    }
    keep
}

struct Problem<'a> {
    z: DMatrix<f64>,
    y: &'a [f64],
    w: Vec<f64>,
    off: Vec<f64>,
}

impl Problem<'_> {
    fn eta(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut eta = &self.z * beta;
        for (e, o) in eta.iter_mut().zip(&self.off) {
            *e += o;
        }
        eta
    }

    fn log_likelihood(&self, eta: &DVector<f64>) -> f64 {
        eta.iter()
            .zip(self.y)
            .zip(&self.w)
            .map(|((&e, &y), &w)| w * (y * e - softplus(e)))
            .sum()
    }

    /// Gradient and information matrix at `eta`.
    fn score_and_information(&self, eta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.z.nrows();
        let p = self.z.ncols();
        let mut resid = DVector::zeros(n);
        let mut zw = self.z.clone();
        for i in 0..n {
            let mu = expit(eta[i]);
            resid[i] = self.w[i] * (self.y[i] - mu);
            let v = (self.w[i] * mu * (1.0 - mu)).sqrt();
            for j in 0..p {
                zw[(i, j)] *= v;
            }
        }
        let grad = self.z.tr_mul(&resid);
        let info = zw.tr_mul(&zw);
        (grad, info)
    }
}

/// Solves `H d = g` by Cholesky, escalating a diagonal ridge on failure.
fn solve_ridged(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(g));
    }
    let scale = h.diagonal().max().max(1e-300);
    let mut lambda = 1e-10 * scale;
    for _ in 0..12 {
        let mut hj = h.clone();
        for i in 0..hj.nrows() {
            hj[(i, i)] += lambda;
        }
        if let Some(ch) = hj.cholesky() {
            return Some(ch.solve(g));
        }
        lambda *= 10.0;
    }
    None
}

/// Maximizes the (weighted) Bernoulli log-likelihood. `y` may be fractional.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    sample_weight: Option<&[f64]>,
    offset: Option<&[f64]>,
    intercept: bool,
) -> Result<LogisticModel> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} responses for {n} rows",
            y.len()
        )));
    }
    if let Some(w) = sample_weight {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {n} rows",
                w.len()
            )));
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "sample weights must be finite and >= 0".into(),
            ));
        }
    }
    if let Some(o) = offset {
        if o.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} offsets for {n} rows",
                o.len()
            )));
        }
    }
    if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidParameter(
            "responses must lie in [0, 1]".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite covariate".into()));
    }

    // Full design: optional intercept followed by RMS-scaled columns.
    let lead = usize::from(intercept);
    let mut full = DMatrix::zeros(n, p + lead);
    let mut scales = vec![1.0; p + lead];
    if intercept {
        full.column_mut(0).fill(1.0);
    }
    for j in 0..p {
        let rms = (x.column(j).norm_squared() / n.max(1) as f64).sqrt();
        let s = if rms > 0.0 { rms } else { 1.0 };
        scales[j + lead] = s;
        full.column_mut(j + lead).copy_from(&(x.column(j) / s));
    }
    let keep = if n == 0 {
        Vec::new()
    } else {
        independent_columns(&full, 1e-9)
    };
    let z = full.select_columns(&keep);
    let prob = Problem {
        z,
        y,
        w: sample_weight.map_or_else(|| vec![1.0; n], <[f64]>::to_vec),
        off: offset.map_or_else(|| vec![0.0; n], <[f64]>::to_vec),
    };

    let k = keep.len();
    let mut beta = DVector::zeros(k);
    let mut eta = prob.eta(&beta);
    let mut ll = prob.log_likelihood(&eta);
    let mut converged = k == 0;
    let mut iterations = 0;
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let (grad, info) = prob.score_and_information(&eta);
        let Some(delta) = solve_ridged(&info, &grad) else {
            return Err(Error::Numerical(
                "logistic information matrix could not be factored".into(),
            ));
        };
        let mut step = 1.0;
        let (mut new_beta, mut new_eta, mut new_ll);
        loop {
            new_beta = &beta + &delta * step;
            new_eta = prob.eta(&new_beta);
            new_ll = prob.log_likelihood(&new_eta);
            if new_ll >= ll - 1e-12 * ll.abs() || step < 1e-10 {
                break;
            }
            step *= 0.5;
        }
        let max_change = (&new_beta - &beta).amax();
        let ll_change = (new_ll - ll).abs();
        beta = new_beta;
        eta = new_eta;
        ll = new_ll;
        if !ll.is_finite() || beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numerical("logistic fit diverged".into()));
        }
        converged = max_change < COEF_TOL || ll_change < LL_TOL * (1.0 + ll.abs());
    }
    let separated = eta.iter().any(|e| e.abs() > SEPARATION_ETA);
    if separated {
        log::warn!("logistic fit: linear predictor beyond ±{SEPARATION_ETA}, data look separated");
    }

    let (_, info) = prob.score_and_information(&eta);
    let cov_diag = info
        .clone()
        .cholesky()
        .map(|c| c.inverse().diagonal())
        .unwrap_or_else(|| DVector::from_element(k, f64::NAN));

    let mut full_beta = vec![0.0; p + lead];
    let mut full_se = vec![f64::NAN; p + lead];
    for (pos, &j) in keep.iter().enumerate() {
        full_beta[j] = beta[pos] / scales[j];
        full_se[j] = cov_diag[pos].sqrt() / scales[j];
    }
    let dropped = (0..p).filter(|j| !keep.contains(&(j + lead))).collect();
    Ok(LogisticModel {
        intercept: intercept.then(|| full_beta[0]),
        intercept_standard_error: intercept.then(|| full_se[0]),
        coefficients: DVector::from_column_slice(&full_beta[lead..]),
        standard_errors: DVector::from_column_slice(&full_se[lead..]),
        dropped,
        iterations,
        converged,
        separated,
        log_likelihood: ll,
    })
}
