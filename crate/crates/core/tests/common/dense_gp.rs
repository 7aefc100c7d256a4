//! Loop-based reference evaluation of the deep-kernel GP.

use dtr_core::dkl::DklParams;
use nalgebra::{DMatrix, DVector};

pub fn standardize(train: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = train.nrows() as f64;
    let mut out = x.clone();
    for j in 0..train.ncols() {
        let mean: f64 = train.column(j).iter().sum::<f64>() / n;
        let var: f64 = train
            .column(j)
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..x.nrows() {
            out[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    out
}

pub fn features(params: &DklParams, xz: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a: Vec<Vec<f64>> = (0..xz.nrows())
        .map(|i| xz.row(i).iter().copied().collect())
        .collect();
    for layer in &params.layers {
        a = a
            .iter()
            .map(|row| {
                (0..layer.w.ncols())
                    .map(|o| {
                        let mut s = layer.b[o];
                        for (i, v) in row.iter().enumerate() {
                            s += v * layer.w[(i, o)];
                        }
                        s.max(0.0)
                    })
                    .collect()
            })
            .collect();
    }
    let d = a.first().map_or(0, Vec::len);
    DMatrix::from_fn(a.len(), d, |i, j| a[i][j])
}

/// Scales `f` with the column extremes of `train_f`.
pub fn scale(train_f: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| {
        let col = train_f.column(j);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (f[(i, j)] - lo) / (hi - lo)
        } else {
            0.0
        }
    })
}

pub fn gram(params: &DklParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ell = params.kernel.log_lengthscale.exp();
    let o = params.kernel.log_outputscale.exp();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut d2 = 0.0;
        for c in 0..a.ncols() {
            d2 += (a[(i, c)] - b[(j, c)]).powi(2);
        }
        o * (-d2 / (2.0 * ell * ell)).exp()
    })
}

/// Warped training inputs.
pub fn train_inputs(params: &DklParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let f = features(params, &standardize(x, x));
    scale(&f, &f)
}

pub fn log_marginal_likelihood(params: &DklParams, x: &DMatrix<f64>, y: &[f64]) -> f64 {
    let s = train_inputs(params, x);
    let n = y.len();
    let mut ky = gram(params, &s, &s);
    for i in 0..n {
        ky[(i, i)] += params.log_noise.exp();
    }
    let inv = ky.clone().try_inverse().expect("invertible");
    let r = DVector::from_iterator(n, y.iter().map(|v| v - params.mean));
    let quad = (r.transpose() * &inv * &r)[(0, 0)];
    -0.5 * (quad + ky.determinant().ln() + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

pub fn predict(
    params: &DklParams,
    x: &DMatrix<f64>,
    y: &[f64],
    xs: &DMatrix<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let f = features(params, &standardize(x, x));
    let s = scale(&f, &f);
    let ss = scale(&f, &features(params, &standardize(x, xs)));
    let n = y.len();
    let mut ky = gram(params, &s, &s);
    for i in 0..n {
        ky[(i, i)] += params.log_noise.exp();
    }
    let inv = ky.try_inverse().expect("invertible");
    let r = DVector::from_iterator(n, y.iter().map(|v| v - params.mean));
    let ks = gram(params, &ss, &s);
    let kss = gram(params, &ss, &ss);
    let mean = &ks * &inv * &r;
    let cov = &kss - &ks * &inv * ks.transpose();
    (
        mean.iter().map(|m| m + params.mean).collect(),
        (0..xs.nrows()).map(|i| cov[(i, i)]).collect(),
    )
}
