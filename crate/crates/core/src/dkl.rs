//! Exact Gaussian-process regression with a deep RBF kernel.
//!
//! Inputs are z-scored, passed through a fully connected ReLU network, and
//! min-max scaled to `[0, 1]` per output feature using the training rows. An
//! RBF kernel on the scaled features, a constant mean and Gaussian noise
//! define the GP. Network weights and GP hyperparameters are trained jointly
//! by Adam ascent on the exact log marginal likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regress::mlp::{column_moments, Dense};
use crate::regress::Regressor;
use crate::seeds;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_JITTER_ESCALATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DklConfig {
    pub hidden: Vec<usize>,
    pub iters: usize,
    pub lr: f64,
    /// Initial RBF lengthscale on the scaled features. `None` takes the
    /// median pairwise distance of the initial training features.
    #[serde(default)]
    pub init_lengthscale: Option<f64>,
    /// Initial noise variance as a fraction of `var(y)`.
    pub init_noise_ratio: f64,
    pub extractor_init: ExtractorInit,
}

/// Initialization of the extractor's dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorInit {
    /// Normal weights with variance `2 / fan_in`, zero biases.
    He,
    /// Weights and biases uniform on `+-1 / sqrt(fan_in)`.
    Uniform,
}

impl Default for DklConfig {
    fn default() -> Self {
        DklConfig {
            hidden: vec![1000, 500, 50],
            iters: 5,
            lr: 0.01,
            init_lengthscale: None,
            init_noise_ratio: 0.1,
            extractor_init: ExtractorInit::He,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    pub log_lengthscale: f64,
    pub log_outputscale: f64,
}

impl RbfKernel {
    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
fn sq_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut d = DMatrix::zeros(a.nrows(), b.nrows());
    for j in 0..b.nrows() {
        let bj = bt.column(j);
        for i in 0..a.nrows() {
            let ai = at.column(i);
            d[(i, j)] = ai
                .iter()
                .zip(bj.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    d
}

fn rbf_from_distances(kernel: &RbfKernel, d2: &DMatrix<f64>) -> DMatrix<f64> {
    let o = kernel.outputscale();
    let inv = 1.0 / (2.0 * kernel.lengthscale().powi(2));
    d2.map(|v| o * (-v * inv).exp())
}

/// `K[i, j] = o * exp(-|a_i - b_j|^2 / (2 l^2))`.
pub fn kernel_matrix(
    kernel: &RbfKernel,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel inputs have {} and {} features",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(rbf_from_distances(kernel, &sq_distances(a, b)))
}

/// Inverse of a lower-triangular matrix by recursive 2x2 blocking.
fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 64 {
        return l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("positive diagonal");
    }
    let h = n / 2;
    let a_inv = lower_inverse(&l.view((0, 0), (h, h)).into_owned());
    let c_inv = lower_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let b = l.view((h, 0), (n - h, h));
    let lower_left = -(&c_inv * b * &a_inv);
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (h, h)).copy_from(&a_inv);
    out.view_mut((h, h), (n - h, n - h)).copy_from(&c_inv);
    out.view_mut((h, 0), (n - h, h)).copy_from(&lower_left);
    out
}

/// All trainable quantities. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DklParams {
    /// Extractor layers; ReLU follows every layer.
    pub layers: Vec<Dense>,
    pub kernel: RbfKernel,
    /// Log of the noise variance.
    pub log_noise: f64,
    pub mean: f64,
}

impl DklParams {
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum::<usize>()
            + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flattens into `[layers..., log_lengthscale, log_outputscale, log_noise, mean]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for l in &self.layers {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v.extend([
            self.kernel.log_lengthscale,
            self.kernel.log_outputscale,
            self.log_noise,
            self.mean,
        ]);
        v
    }

    pub fn set_from(&mut self, v: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            for x in l.w.iter_mut().chain(l.b.iter_mut()) {
                *x = v[k];
                k += 1;
            }
        }
        self.kernel.log_lengthscale = v[k];
        self.kernel.log_outputscale = v[k + 1];
        self.log_noise = v[k + 2];
        self.mean = v[k + 3];
    }
}

/// Cached quantities needed for prediction.
#[derive(Debug, Clone)]
struct Posterior {
    scale_min: Vec<f64>,
    scale_range: Vec<f64>,
    features: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct DklModel {
    pub params: DklParams,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
    posterior: Option<Posterior>,
    /// Log marginal likelihood before each training step and after the last.
    pub lml_trace: Vec<f64>,
    /// Diagonal jitter the last factorization needed (0 if none).
    pub jitter: f64,
}

struct Extracted {
    /// `acts[0]` is the standardized input; `acts[l + 1]` follows layer `l`.
    acts: Vec<DMatrix<f64>>,
}

fn extract(layers: &[Dense], xz: &DMatrix<f64>) -> Extracted {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(xz.clone());
    for layer in layers {
        let mut z = acts.last().expect("activation") * &layer.w;
        for mut row in z.row_iter_mut() {
            row += layer.b.transpose();
        }
        z.apply(|v| *v = v.max(0.0));
        acts.push(z);
    }
    Extracted { acts }
}

struct Scaled {
    s: DMatrix<f64>,
    min: Vec<f64>,
    range: Vec<f64>,
    argmin: Vec<usize>,
    argmax: Vec<usize>,
}

fn min_max_scale(f: &DMatrix<f64>) -> Scaled {
    let (n, d) = f.shape();
    let mut s = DMatrix::zeros(n, d);
    let mut min = vec![0.0; d];
    let mut range = vec![0.0; d];
    let mut argmin = vec![0; d];
    let mut argmax = vec![0; d];
    for j in 0..d {
        let col = f.column(j);
        for i in 1..n {
            if col[i] < col[argmin[j]] {
                argmin[j] = i;
            }
            if col[i] > col[argmax[j]] {
                argmax[j] = i;
            }
        }
        min[j] = col[argmin[j]];
        range[j] = col[argmax[j]] - min[j];
        if range[j] > 0.0 {
            for i in 0..n {
                s[(i, j)] = (col[i] - min[j]) / range[j];
            }
        }
    }
    Scaled {
        s,
        min,
        range,
        argmin,
        argmax,
    }
}

/// Median Euclidean distance over distinct row pairs; `None` when it is
/// not positive.
fn median_distance(f: &DMatrix<f64>) -> Option<f64> {
    let d2 = sq_distances(f, f);
    let n = f.nrows();
    let mut v: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d2[(i, j)]).collect();
    if v.is_empty() {
        return None;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let d = m.sqrt();
    (d > 0.0 && d.is_finite()).then_some(d)
}

fn apply_scale(f: &DMatrix<f64>, min: &[f64], range: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| {
        if range[j] > 0.0 {
            (f[(i, j)] - min[j]) / range[j]
        } else {
            0.0
        }
    })
}

/// Cholesky of `K + noise I`, adding jitter only when the plain factorization fails.
fn factor(k: &DMatrix<f64>, noise: f64, outputscale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut ky = k.clone();
    for i in 0..ky.nrows() {
        ky[(i, i)] += noise;
    }
    if let Some(c) = ky.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let mut jitter = 1e-6 * outputscale;
    for _ in 0..=MAX_JITTER_ESCALATIONS {
        let mut kj = ky.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            log::debug!("kernel factorization needed jitter {jitter:e}");
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    let diag = ky.diagonal();
    Err(Error::Numerical(format!(
        "kernel matrix not positive definite after jitter {:e}; n={}, outputscale={outputscale:e}, noise={noise:e}, diagonal range [{:e}, {:e}]",
        jitter / 10.0,
        ky.nrows(),
        diag.min(),
        diag.max()
    )))
}

struct Evaluation {
    lml: f64,
    grad: Option<DklParams>,
    posterior: Posterior,
    jitter: f64,
}

fn evaluate(
    params: &DklParams,
    xz: &DMatrix<f64>,
    y: &[f64],
    want_grad: bool,
) -> Result<Evaluation> {
    let n = y.len();
    let ex = extract(&params.layers, xz);
    let f = ex.acts.last().expect("features");
    let sc = min_max_scale(f);
    let d2 = sq_distances(&sc.s, &sc.s);
    let k = rbf_from_distances(&params.kernel, &d2);
    let o = params.kernel.outputscale();
    let noise = params.log_noise.exp();
    let (chol, jitter) = factor(&k, noise, o)?;
    let r = DVector::from_iterator(n, y.iter().map(|v| v - params.mean));
    let alpha = chol.solve(&r);
    let logdet: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let lml = -0.5 * (r.dot(&alpha) + logdet + n as f64 * LN_2PI);

    let grad = if want_grad {
        let linv = lower_inverse(&chol.l());
        let kinv = linv.transpose() * &linv;
        // dL/dK_y
        let mut g = &alpha * alpha.transpose();
        g -= &kinv;
        g *= 0.5;
        let m = g.component_mul(&k);
        let ell2 = params.kernel.lengthscale().powi(2);
        let d_log_ell = m.dot(&d2) / ell2;
        let d_log_o = m.sum();
        let d_log_noise = noise * g.trace();
        let d_mean = alpha.sum();

        // dL/dS = -(2 / l^2) (diag(M 1) S - M S)
        let row_sums = m.column_sum();
        let ms = &m * &sc.s;
        let mut gs = DMatrix::from_fn(n, sc.s.ncols(), |i, j| {
            row_sums[i] * sc.s[(i, j)] - ms[(i, j)]
        });
        gs *= -2.0 / ell2;

        // through the min-max scaler, including its dependence on the column extremes
        let d = f.ncols();
        let mut gf = DMatrix::zeros(n, d);
        for j in 0..d {
            let rj = sc.range[j];
            if rj <= 0.0 {
                continue;
            }
            let mut da = 0.0;
            let mut db = 0.0;
            for i in 0..n {
                gf[(i, j)] = gs[(i, j)] / rj;
                da += gs[(i, j)] * (sc.s[(i, j)] - 1.0) / rj;
                db -= gs[(i, j)] * sc.s[(i, j)] / rj;
            }
            gf[(sc.argmin[j], j)] += da;
            gf[(sc.argmax[j], j)] += db;
        }

        let mut layer_grads: Vec<Dense> = Vec::with_capacity(params.layers.len());
        let mut ga = gf;
        for l in (0..params.layers.len()).rev() {
            // ReLU: the stored activation is positive exactly where the unit is active
            ga.zip_apply(&ex.acts[l + 1], |g, a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let gw = ex.acts[l].transpose() * &ga;
            let gb = ga.row_sum().transpose();
            if l > 0 {
                ga = &ga * params.layers[l].w.transpose();
            }
            layer_grads.push(Dense { w: gw, b: gb });
        }
        layer_grads.reverse();
        Some(DklParams {
            layers: layer_grads,
            kernel: RbfKernel {
                log_lengthscale: d_log_ell,
                log_outputscale: d_log_o,
            },
            log_noise: d_log_noise,
            mean: d_mean,
        })
    } else {
        None
    };

    Ok(Evaluation {
        lml,
        grad,
        posterior: Posterior {
            scale_min: sc.min,
            scale_range: sc.range,
            features: sc.s,
            chol,
            alpha,
        },
        jitter,
    })
}

impl DklModel {
    /// Untrained model: initialized extractor, configured or median-distance
    /// lengthscale, outputscale `var(y)`, noise a configured fraction of
    /// `var(y)`, mean `mean(y)`.
    pub fn init(x: &DMatrix<f64>, y: &[f64], config: &DklConfig, seed: u64) -> Result<DklModel> {
        if config.init_lengthscale.is_some_and(|l| !(l > 0.0)) || !(config.init_noise_ratio > 0.0) {
            return Err(Error::InvalidParameter(
                "initial lengthscale and noise ratio must be positive".into(),
            ));
        }
        if config.hidden.is_empty() || config.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter(
                "extractor layer sizes must be positive".into(),
            ));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} responses for {} rows",
                y.len(),
                x.nrows()
            )));
        }
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-8);
        let mut rng = seeds::rng(seed);
        let mut sizes = vec![x.ncols()];
        sizes.extend(&config.hidden);
        let layers = sizes
            .windows(2)
            .map(|s| match config.extractor_init {
                ExtractorInit::He => {
                    let sd = (2.0 / s[0] as f64).sqrt();
                    Dense {
                        w: DMatrix::from_fn(s[0], s[1], |_, _| {
                            sd * rng.sample::<f64, _>(StandardNormal)
                        }),
                        b: DVector::zeros(s[1]),
                    }
                }
                ExtractorInit::Uniform => {
                    let bound = 1.0 / (s[0] as f64).sqrt();
                    let w = DMatrix::from_fn(s[0], s[1], |_, _| rng.random_range(-bound..bound));
                    let b = DVector::from_fn(s[1], |_, _| rng.random_range(-bound..bound));
                    Dense { w, b }
                }
            })
            .collect::<Vec<Dense>>();
        let (x_mean, x_sd) = column_moments(x);
        let lengthscale = match config.init_lengthscale {
            Some(l) => l,
            None => {
                let xz = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - x_mean[j]) / x_sd[j]);
                let feats = extract(&layers, &xz).acts.pop().expect("activation");
                median_distance(&min_max_scale(&feats).s).unwrap_or(1.0)
            }
        };
        Ok(DklModel {
            params: DklParams {
                layers,
                kernel: RbfKernel {
                    log_lengthscale: lengthscale.ln(),
                    log_outputscale: var.ln(),
                },
                log_noise: (config.init_noise_ratio * var).ln(),
                mean,
            },
            x_mean,
            x_sd,
            posterior: None,
            lml_trace: Vec::new(),
            jitter: 0.0,
        })
    }

    fn standardize(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} inputs, got {}",
                self.x_mean.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.x_mean[j]) / self.x_sd[j]
        }))
    }

    /// Conditions the GP on `(x, y)` with the current parameters.
    pub fn condition(&mut self, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
        let xz = self.standardize(x)?;
        let ev = evaluate(&self.params, &xz, y, false)?;
        self.posterior = Some(ev.posterior);
        self.jitter = ev.jitter;
        Ok(ev.lml)
    }

    /// Predictive mean and variance before clamping the variance at 0.
    pub fn predict_unclamped(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let post = self
            .posterior
            .as_ref()
            .ok_or_else(|| Error::State("deep kernel model has not been fitted".into()))?;
        let xz = self.standardize(x)?;
        let f = extract(&self.params.layers, &xz)
            .acts
            .pop()
            .expect("features");
        let s = apply_scale(&f, &post.scale_min, &post.scale_range);
        let kstar = kernel_matrix(&self.params.kernel, &s, &post.features)?;
        let mut mean = &kstar * &post.alpha;
        mean.add_scalar_mut(self.params.mean);
        let v = post
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar.transpose())
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let o = self.params.kernel.outputscale();
        let var = DVector::from_iterator(x.nrows(), v.column_iter().map(|c| o - c.norm_squared()));
        Ok((mean, var))
    }
}

/// Log marginal likelihood of `y` given `x` under the model's parameters, with
/// its gradient with respect to every parameter. The scaler is computed from
/// the features of `x`.
pub fn log_marginal_likelihood(
    model: &DklModel,
    x: &DMatrix<f64>,
    y: &[f64],
) -> Result<(f64, DklParams)> {
    if y.is_empty() || x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} responses for {} rows",
            y.len(),
            x.nrows()
        )));
    }
    let xz = model.standardize(x)?;
    let ev = evaluate(&model.params, &xz, y, true)?;
    Ok((ev.lml, ev.grad.expect("gradient requested")))
}

/// Trains by `config.iters` full-batch Adam ascent steps and caches the posterior.
pub fn fit_dkl(x: &DMatrix<f64>, y: &[f64], config: &DklConfig, seed: u64) -> Result<DklModel> {
    if y.len() < 2 {
        return Err(Error::InvalidParameter(
            "deep kernel fit needs at least 2 rows".into(),
        ));
    }
    let mut model = DklModel::init(x, y, config, seed)?;
    let xz = model.standardize(x)?;
    let mut theta = model.params.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for t in 1..=config.iters {
        let ev = evaluate(&model.params, &xz, y, true)?;
        if !ev.lml.is_finite() {
            return Err(Error::Numerical(format!(
                "log marginal likelihood {} at step {t}; lengthscale={:e}, outputscale={:e}, noise={:e}, mean={}",
                ev.lml,
                model.params.kernel.lengthscale(),
                model.params.kernel.outputscale(),
                model.params.log_noise.exp(),
                model.params.mean
            )));
        }
        model.lml_trace.push(ev.lml);
        let g = ev.grad.expect("gradient requested").to_vec();
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for k in 0..theta.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            theta[k] += config.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
        model.params.set_from(&theta);
    }
    let ev = evaluate(&model.params, &xz, y, false)?;
    if !ev.lml.is_finite() {
        return Err(Error::Numerical(format!(
            "log marginal likelihood {} after training",
            ev.lml
        )));
    }
    model.lml_trace.push(ev.lml);
    model.posterior = Some(ev.posterior);
    model.jitter = ev.jitter;
    Ok(model)
}

/// Predictive mean and variance; variances are clamped at 0.
pub fn predict(model: &DklModel, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let (mean, mut var) = model.predict_unclamped(x)?;
    let mut clamped = 0;
    for v in var.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::debug!("clamped {clamped} negative predictive variances");
    }
    Ok((mean, var))
}

impl Regressor for DklModel {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        predict(self, x).map(|(m, _)| m)
    }

    fn predict_with_variance(
        &self,
        x: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, Option<DVector<f64>>)> {
        predict(self, x).map(|(m, v)| (m, Some(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = seeds::rng(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let y = (0..n)
            .map(|i| x[(i, 0)].sin() + 0.3 * x[(i, p - 1)] + 0.1 * rng.random::<f64>())
            .collect();
        (x, y)
    }

    fn small_config() -> DklConfig {
        DklConfig {
            hidden: vec![8, 6, 3],
            iters: 5,
            lr: 0.01,
            ..DklConfig::default()
        }
    }

    #[test]
    fn zero_distance_gives_outputscale() {
        let k = RbfKernel {
            log_lengthscale: 0.3,
            log_outputscale: 1.7f64.ln(),
        };
        let a = DMatrix::from_row_slice(1, 3, &[0.2, 0.5, 0.9]);
        let m = kernel_matrix(&k, &a, &a).unwrap();
        assert!((m[(0, 0)] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn huge_lengthscale_flattens_kernel() {
        let k = RbfKernel {
            log_lengthscale: 1e8f64.ln(),
            log_outputscale: 0.5,
        };
        let a = DMatrix::from_fn(4, 2, |i, j| (i + 3 * j) as f64);
        let m = kernel_matrix(&k, &a, &a).unwrap();
        assert!(m.iter().all(|v| (v - 0.5f64.exp()).abs() < 1e-6));
    }

    #[test]
    fn kernel_matches_scalar_formula() {
        let k = RbfKernel {
            log_lengthscale: 0.7f64.ln(),
            log_outputscale: 2.0f64.ln(),
        };
        let mut rng = seeds::rng(1);
        let a = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>());
        let m = kernel_matrix(&k, &a, &a).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut d2 = 0.0;
                for c in 0..3 {
                    d2 += (a[(i, c)] - a[(j, c)]) * (a[(i, c)] - a[(j, c)]);
                }
                let brute = 2.0 * (-d2 / (2.0 * 0.49)).exp();
                assert!((m[(i, j)] - brute).abs() < 1e-12);
                assert!((m[(i, j)] - m[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn median_distance_of_known_points() {
        let f = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        assert_eq!(median_distance(&f), Some(2.0));
        let same = DMatrix::from_element(4, 2, 0.5);
        assert_eq!(median_distance(&same), None);
        assert_eq!(median_distance(&DMatrix::zeros(1, 2)), None);
    }

    #[test]
    fn blocked_triangular_inverse() {
        let mut rng = seeds::rng(8);
        let n = 150;
        let l = DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => 1.0 + rng.random::<f64>(),
            std::cmp::Ordering::Greater => rng.random::<f64>() * 0.1,
        });
        let prod = &l * lower_inverse(&l);
        assert!((prod - DMatrix::identity(n, n)).amax() < 1e-12);
    }

    #[test]
    fn fit_is_deterministic_and_does_not_lower_likelihood() {
        let (x, y) = small_problem(40, 3, 5);
        let a = fit_dkl(&x, &y, &small_config(), 9).unwrap();
        let b = fit_dkl(&x, &y, &small_config(), 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.lml_trace.len(), 6);
        assert!(a.lml_trace[5] >= a.lml_trace[0]);
    }

    #[test]
    fn unfitted_model_refuses_to_predict() {
        let (x, y) = small_problem(5, 2, 1);
        let m = DklModel::init(&x, &y, &small_config(), 0).unwrap();
        assert!(matches!(predict(&m, &x), Err(Error::State(_))));
    }

    #[test]
    fn permuting_test_rows_permutes_predictions() {
        let (x, y) = small_problem(30, 2, 3);
        let m = fit_dkl(&x, &y, &small_config(), 2).unwrap();
        let (xt, _) = small_problem(6, 2, 4);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = xt.select_rows(&perm);
        let (m1, v1) = predict(&m, &xt).unwrap();
        let (m2, v2) = predict(&m, &xp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(m2[k], m1[i]);
            assert_eq!(v2[k], v1[i]);
        }
    }
}
