mod common;

use common::dense_gp;
use dtr_core::dkl::{fit_dkl, log_marginal_likelihood, predict, DklConfig, DklModel, DklParams};
use dtr_core::seeds;
use nalgebra::DMatrix;
use rand::Rng;

fn problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = seeds::rng(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    let y = (0..n)
        .map(|i| (1.3 * x[(i, 0)]).sin() - 0.4 * x[(i, 1)] + 0.2 * rng.random::<f64>())
        .collect();
    (x, y)
}

fn config() -> DklConfig {
    DklConfig {
        hidden: vec![7, 5, 3],
        iters: 3,
        lr: 0.01,
        ..DklConfig::default()
    }
}

fn trained(n: usize, seed: u64) -> (DklModel, DMatrix<f64>, Vec<f64>) {
    let (x, y) = problem(n, 3, seed);
    let mut m = fit_dkl(&x, &y, &config(), seed).unwrap();
    // move biases off zero so no pre-activation sits on the ReLU kink
    let mut rng = seeds::rng(seed + 100);
    for l in &mut m.params.layers {
        l.b.apply(|b| *b += 0.05 + 0.1 * rng.random::<f64>());
    }
    m.condition(&x, &y).unwrap();
    (m, x, y)
}

#[test]
fn single_point_closed_form() {
    let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.1]);
    let y = [0.7];
    let mut m = DklModel::init(&x, &y, &config(), 1).unwrap();
    m.params.kernel.log_outputscale = 0.0;
    m.params.log_noise = 0.0;
    m.params.mean = 0.7;
    let (v, _) = log_marginal_likelihood(&m, &x, &y).unwrap();
    let expected = -0.5 * (2f64.ln() + (2.0 * std::f64::consts::PI).ln());
    assert!((v - expected).abs() < 1e-14);
}

#[test]
fn likelihood_matches_dense_inverse() {
    let (m, x, y) = trained(6, 3);
    let (v, _) = log_marginal_likelihood(&m, &x, &y).unwrap();
    let oracle = dense_gp::log_marginal_likelihood(&m.params, &x, &y);
    assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
}

fn class_of(params: &DklParams, k: usize) -> &'static str {
    let net: usize = params.layers.iter().map(|l| l.w.len() + l.b.len()).sum();
    match k.checked_sub(net) {
        None => "extractor",
        Some(0) => "lengthscale",
        Some(1) => "outputscale",
        Some(2) => "noise",
        _ => "mean",
    }
}

#[test]
fn gradient_matches_central_differences() {
    let (m, x, y) = trained(10, 7);
    let (_, grad) = log_marginal_likelihood(&m, &x, &y).unwrap();
    let g = grad.to_vec();
    let theta = m.params.to_vec();
    let h = 1e-4;
    let mut worst: std::collections::BTreeMap<&str, f64> = Default::default();
    for k in 0..theta.len() {
        let eval = |d: f64| {
            let mut t = theta.clone();
            t[k] += d;
            let mut mm = m.clone();
            mm.params.set_from(&t);
            log_marginal_likelihood(&mm, &x, &y).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3);
        let e = worst.entry(class_of(&m.params, k)).or_insert(0.0);
        *e = e.max(rel);
    }
    assert_eq!(worst.len(), 5);
    for (class, rel) in &worst {
        assert!(*rel < 1e-4, "{class}: relative error {rel:e}");
    }
}

#[test]
fn prediction_matches_dense_formula() {
    let (m, x, y) = trained(4, 11);
    let (xs, _) = problem(5, 3, 12);
    let (mean, var) = m.predict_unclamped(&xs).unwrap();
    let (om, ov) = dense_gp::predict(&m.params, &x, &y, &xs);
    for i in 0..5 {
        assert!((mean[i] - om[i]).abs() < 1e-10);
        assert!((var[i] - ov[i]).abs() < 1e-10);
        assert!(var[i] >= -1e-8);
    }
}

#[test]
fn noiseless_model_interpolates_training_points() {
    let (mut m, x, y) = trained(5, 13);
    m.params.log_noise = 1e-12f64.ln();
    m.params.kernel.log_lengthscale = 0.2f64.ln();
    m.condition(&x, &y).unwrap();
    let (mean, var) = predict(&m, &x).unwrap();
    for i in 0..5 {
        assert!((mean[i] - y[i]).abs() < 1e-6);
        assert!(var[i] < 1e-6);
    }
}

#[test]
fn far_points_revert_to_prior() {
    let (x, y) = problem(8, 3, 17);
    let m = fit_dkl(
        &x,
        &y,
        &DklConfig {
            iters: 0,
            ..config()
        },
        17,
    )
    .unwrap();
    // zero biases make the extractor positively homogeneous in standardized inputs
    let means: Vec<f64> = (0..3).map(|j| x.column(j).mean()).collect();
    let row = (0..8)
        .find(|&i| {
            let xi = DMatrix::from_fn(1, 3, |_, j| x[(i, j)]);
            let xz = dense_gp::standardize(&x, &xi);
            dense_gp::features(&m.params, &xz).iter().any(|v| *v > 0.0)
        })
        .unwrap();
    let far = DMatrix::from_fn(1, 3, |_, j| means[j] + 1e4 * (x[(row, j)] - means[j]));
    let (mean, var) = predict(&m, &far).unwrap();
    let o = m.params.kernel.log_outputscale.exp();
    assert!((mean[0] - m.params.mean).abs() < 1e-3);
    assert!((var[0] - o).abs() < 1e-3);
}
