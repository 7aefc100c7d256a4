//! Fully connected regression network: ReLU hidden layers, linear output,
//! squared-error loss, Adam, inverted dropout during training.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Regressor;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Probability of dropping a hidden unit during training.
    pub dropout: f64,
    pub batch_size: usize,
}

impl MlpConfig {
    /// One hidden layer of 128 units.
    pub fn single_hidden() -> MlpConfig {
        MlpConfig {
            hidden: vec![128],
            epochs: 100,
            lr: 1e-3,
            dropout: 0.0,
            batch_size: 32,
        }
    }

    /// The plain-network outcome model of the two-step estimator.
    pub fn two_step_network() -> MlpConfig {
        MlpConfig {
            hidden: vec![128, 64, 32],
            epochs: 5,
            lr: 0.01,
            dropout: 0.9,
            batch_size: 32,
        }
    }
}

/// Dense layer `A -> A W + b`, with `w` of shape `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Dense {
        Dense {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }

    fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = a * &self.w;
        for mut row in z.row_iter_mut() {
            row += self.b.transpose();
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Dense>,
}

impl Network {
    /// He-initialized weights, zero biases. `sizes` includes input and output.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R) -> Network {
        let layers = sizes
            .windows(2)
            .map(|s| {
                let sd = (2.0 / s[0] as f64).sqrt();
                Dense {
                    w: DMatrix::from_fn(s[0], s[1], |_, _| {
                        sd * rng.sample::<f64, _>(StandardNormal)
                    }),
                    b: DVector::zeros(s[1]),
                }
            })
            .collect();
        Network { layers }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if l < last {
                a.apply(|v| *v = v.max(0.0));
            }
        }
        a.column(0).into_owned()
    }

    /// Mean squared error over the batch and its gradient. `masks` holds one
    /// pre-scaled dropout mask per hidden layer.
    pub fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        y: &[f64],
        masks: Option<&[DMatrix<f64>]>,
    ) -> (f64, Vec<Dense>) {
        let last = self.layers.len() - 1;
        let bsz = x.nrows() as f64;
        let mut acts = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(acts.last().expect("input activation"));
            if l < last {
                let mut a = z.map(|v| v.max(0.0));
                if let Some(m) = masks {
                    a.component_mul_assign(&m[l]);
                }
                pre.push(z);
                acts.push(a);
            } else {
                pre.push(z.clone());
                acts.push(z);
            }
        }
        let out = acts.last().expect("output").column(0);
        let mut loss = 0.0;
        let mut g = DMatrix::zeros(x.nrows(), 1);
        for i in 0..x.nrows() {
            let r = out[i] - y[i];
            loss += r * r;
            g[(i, 0)] = 2.0 * r / bsz;
        }
        loss /= bsz;

        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        for l in (0..self.layers.len()).rev() {
            grads[l].w = acts[l].transpose() * &g;
            grads[l].b = g.row_sum().transpose();
            if l > 0 {
                let mut back = &g * self.layers[l].w.transpose();
                if let Some(m) = masks {
                    back.component_mul_assign(&m[l - 1]);
                }
                back.zip_apply(&pre[l - 1], |b, z| {
                    if z <= 0.0 {
                        *b = 0.0;
                    }
                });
                g = back;
            }
        }
        (loss, grads)
    }
}

/// A trained network with input and target standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub network: Network,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
    y_mean: f64,
    y_sd: f64,
}

impl Mlp {
    fn standardize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.x_mean[j]) / self.x_sd[j]
        })
    }
}

impl Regressor for Mlp {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "network has {} inputs, got {}",
                self.x_mean.len(),
                x.ncols()
            )));
        }
        let z = self.network.forward(&self.standardize(x));
        Ok(z.map(|v| self.y_mean + self.y_sd * v))
    }
}

pub(crate) fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let mut mean = Vec::with_capacity(x.ncols());
    let mut sd = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let m = col.sum() / n;
        let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        sd.push(if v > 0.0 { v.sqrt() } else { 1.0 });
    }
    (mean, sd)
}

struct Adam {
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Network, lr: f64) -> Adam {
        Adam {
            m: net.layers.iter().map(Dense::zeros_like).collect(),
            v: net.layers.iter().map(Dense::zeros_like).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &[Dense]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            for k in 0..layer.w.len() {
                update(
                    &mut layer.w[k],
                    grads[l].w[k],
                    &mut self.m[l].w[k],
                    &mut self.v[l].w[k],
                );
            }
            for k in 0..layer.b.len() {
                update(
                    &mut layer.b[k],
                    grads[l].b[k],
                    &mut self.m[l].b[k],
                    &mut self.v[l].b[k],
                );
            }
        }
    }
}

pub fn fit_mlp(x: &DMatrix<f64>, y: &[f64], config: &MlpConfig, seed: u64) -> Result<Mlp> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} responses for {n} rows",
            y.len()
        )));
    }
    if config.hidden.iter().any(|&h| h == 0) || config.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "layer sizes and batch size must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::InvalidParameter(format!(
            "dropout {} outside [0, 1)",
            config.dropout
        )));
    }
    let (x_mean, x_sd) = column_moments(x);
    let y_mean = y.iter().sum::<f64>() / n.max(1) as f64;
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    let y_sd = if y_var > 0.0 { y_var.sqrt() } else { 1.0 };

    let mut sizes = vec![x.ncols()];
    sizes.extend(&config.hidden);
    sizes.push(1);
    let mut rng = seeds::rng(seed);
    let mut model = Mlp {
        network: Network::init(&sizes, &mut rng),
        x_mean,
        x_sd,
        y_mean,
        y_sd,
    };
    let xs = model.standardize(x);
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_sd).collect();
    let keep = 1.0 - config.dropout;
    let mut adam = Adam::new(&model.network, config.lr);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let xb = xs.select_rows(batch);
            let yb: Vec<f64> = batch.iter().map(|&i| ys[i]).collect();
            let masks: Option<Vec<DMatrix<f64>>> = (config.dropout > 0.0).then(|| {
                config
                    .hidden
                    .iter()
                    .map(|&h| {
                        DMatrix::from_fn(batch.len(), h, |_, _| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                    })
                    .collect()
            });
            let (loss, grads) = model.network.loss_and_gradient(&xb, &yb, masks.as_deref());
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "network loss became {loss} at epoch {epoch}, batch {b}"
                )));
            }
            adam.step(&mut model.network, &grads);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::linear::fit_ols;

    #[test]
    fn zero_epochs_is_a_forward_pass_of_the_initial_network() {
        let x = DMatrix::from_fn(10, 3, |i, j| (i * 3 + j) as f64);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let cfg = MlpConfig {
            epochs: 0,
            ..MlpConfig::single_hidden()
        };
        let m = fit_mlp(&x, &y, &cfg, 17).unwrap();
        let fresh = Network::init(&[3, 128, 1], &mut seeds::rng(17));
        assert_eq!(m.network, fresh);
        let z = fresh.forward(&m.standardize(&x));
        let pred = m.predict(&x).unwrap();
        for i in 0..10 {
            assert_eq!(pred[i], m.y_mean + m.y_sd * z[i]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeds::rng(21);
        let mut net = Network::init(&[4, 6, 5, 1], &mut rng);
        // nonzero biases keep pre-activations off the ReLU kink
        for layer in &mut net.layers {
            layer.b.apply(|b| *b = 0.1 + rng.random::<f64>() * 0.2);
        }
        let x = DMatrix::from_fn(3, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = [0.3, -1.2, 0.8];
        let masks = vec![
            DMatrix::from_fn(3, 6, |i, j| if (i + j) % 3 == 0 { 0.0 } else { 1.5 }),
            DMatrix::from_fn(3, 5, |i, j| if (i * j) % 4 == 1 { 0.0 } else { 1.5 }),
        ];
        for mk in [None, Some(masks.as_slice())] {
            let (_, grads) = net.loss_and_gradient(&x, &y, mk);
            let h = 1e-6;
            for l in 0..net.layers.len() {
                for k in 0..net.layers[l].w.len() + net.layers[l].b.len() {
                    let bump = |d: f64| {
                        let mut n2 = net.clone();
                        let nw = n2.layers[l].w.len();
                        if k < nw {
                            n2.layers[l].w[k] += d;
                        } else {
                            n2.layers[l].b[k - nw] += d;
                        }
                        n2.loss_and_gradient(&x, &y, mk).0
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = if k < grads[l].w.len() {
                        grads[l].w[k]
                    } else {
                        grads[l].b[k - grads[l].w.len()]
                    };
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        (fd - an).abs() / denom < 1e-4,
                        "layer {l} param {k}: {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_hidden_layer_fits_linear_data_nearly_as_well_as_ols() {
        let mut rng = seeds::rng(31);
        let n = 2000;
        let x = DMatrix::from_fn(n, 5, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                1.0 + x[(i, 0)] - 2.0 * x[(i, 1)]
                    + 0.5 * x[(i, 4)]
                    + 0.5 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let mse = |p: &DVector<f64>| {
            p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64
        };
        let ols = mse(&fit_ols(&x, &y).unwrap().predict(&x).unwrap());
        let cfg = MlpConfig {
            epochs: 30,
            ..MlpConfig::single_hidden()
        };
        let net = mse(&fit_mlp(&x, &y, &cfg, 1).unwrap().predict(&x).unwrap());
        assert!(net < 2.0 * ols, "network {net}, ols {ols}");
    }

    #[test]
    fn deterministic_given_seed() {
        let x = DMatrix::from_fn(64, 2, |i, j| ((i + 2 * j) % 9) as f64);
        let y: Vec<f64> = (0..64).map(|i| (i % 5) as f64).collect();
        let cfg = MlpConfig::two_step_network();
        assert_eq!(
            fit_mlp(&x, &y, &cfg, 4).unwrap(),
            fit_mlp(&x, &y, &cfg, 4).unwrap()
        );
    }
}
