//! Discrete learner-set selection by K-fold cross-validation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forest::{fit_forest, ForestParams};
use super::linear::fit_ols;
use super::mlp::{fit_mlp, MlpConfig};
use super::Regressor;
use crate::error::{Error, Result};
use crate::seeds;

/// Nested candidate sets: linear; linear + forest; linear + forest + network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LearnerSet {
    L1,
    L2,
    L3,
}

impl LearnerSet {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerSet::L1 => "L1",
            LearnerSet::L2 => "L2",
            LearnerSet::L3 => "L3",
        }
    }

    pub fn parse(s: &str) -> Result<LearnerSet> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L1" => Ok(LearnerSet::L1),
            "L2" => Ok(LearnerSet::L2),
            "L3" => Ok(LearnerSet::L3),
            other => Err(Error::InvalidParameter(format!(
                "unknown learner set {other:?}"
            ))),
        }
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        let mut c = vec![Candidate::Linear];
        if *self >= LearnerSet::L2 {
            c.push(Candidate::Forest(ForestParams::default()));
        }
        if *self >= LearnerSet::L3 {
            c.push(Candidate::Mlp(MlpConfig::single_hidden()));
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Candidate {
    Linear,
    Forest(ForestParams),
    Mlp(MlpConfig),
}

impl Candidate {
    pub fn name(&self) -> &'static str {
        match self {
            Candidate::Linear => "linear",
            Candidate::Forest(_) => "forest",
            Candidate::Mlp(_) => "mlp",
        }
    }

    pub fn fit(&self, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Result<Box<dyn Regressor>> {
        Ok(match self {
            Candidate::Linear => Box::new(fit_ols(x, y)?),
            Candidate::Forest(p) => {
                Box::new(fit_forest(x, y, &ForestParams { seed, ..p.clone() })?)
            }
            Candidate::Mlp(cfg) => Box::new(fit_mlp(x, y, cfg, seed)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectOptions {
    pub folds: usize,
    /// Average all candidates with equal weight instead of picking one.
    pub averaging: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            folds: 5,
            averaging: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: String,
    /// Cross-validated MSE per candidate in set order.
    pub cv_mse: Vec<(String, f64)>,
}

/// Equal-weight average of refitted candidates.
pub struct AveragedModel {
    members: Vec<Box<dyn Regressor>>,
}

impl Regressor for AveragedModel {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(x.nrows());
        for m in &self.members {
            acc += m.predict(x)?;
        }
        Ok(acc / self.members.len() as f64)
    }
}

fn cv_mse(
    c: &Candidate,
    x: &DMatrix<f64>,
    y: &[f64],
    folds: &[usize],
    k: usize,
    seed: u64,
) -> Result<f64> {
    let n = y.len();
    let mut sse = 0.0;
    for f in 0..k {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = c.fit(&x.select_rows(&train), &yt, seeds::derive(seed, f as u64))?;
        let pred = model.predict(&x.select_rows(&test))?;
        sse += test
            .iter()
            .zip(pred.iter())
            .map(|(&i, p)| (p - y[i]).powi(2))
            .sum::<f64>();
    }
    Ok(sse / n as f64)
}

pub fn select_learner(
    set: LearnerSet,
    x: &DMatrix<f64>,
    y: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Box<dyn Regressor>> {
    let opts = SelectOptions {
        folds,
        averaging: false,
    };
    select_learner_with(set, x, y, &opts, seed).map(|(m, _)| m)
}

/// Fits every candidate under K-fold CV and refits the lowest-MSE one on all
/// rows (ties go to the earlier candidate). With `averaging`, every candidate
/// is refit and averaged.
pub fn select_learner_with(
    set: LearnerSet,
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &SelectOptions,
    seed: u64,
) -> Result<(Box<dyn Regressor>, Selection)> {
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} responses for {} rows",
            n,
            x.nrows()
        )));
    }
    let candidates = set.candidates();
    let refit_seed = seeds::derive_label(seed, "refit");
    if opts.averaging {
        let members = candidates
            .iter()
            .enumerate()
            .map(|(c, cand)| cand.fit(x, y, seeds::derive(refit_seed, c as u64)))
            .collect::<Result<Vec<_>>>()?;
        let sel = Selection {
            chosen: "average".into(),
            cv_mse: Vec::new(),
        };
        return Ok((Box::new(AveragedModel { members }), sel));
    }
    if candidates.len() == 1 || n < 2 {
        let model = candidates[0].fit(x, y, refit_seed)?;
        let sel = Selection {
            chosen: candidates[0].name().into(),
            cv_mse: Vec::new(),
        };
        return Ok((model, sel));
    }

    let k = opts.folds.clamp(2, n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeds::rng(seeds::derive_label(seed, "folds")));
    let mut folds = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        folds[i] = pos % k;
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (c, cand) in candidates.iter().enumerate() {
        let mse = match cv_mse(cand, x, y, &folds, k, seeds::derive(seed, c as u64)) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(_) => {
                log::warn!("candidate {} failed cross-validation", cand.name());
                f64::INFINITY
            }
        };
        scores.push((cand.name().to_string(), mse));
        if mse.is_finite() && best.is_none_or(|b| mse < b.1) {
            best = Some((c, mse));
        }
    }
    let Some((c, _)) = best else {
        return Err(Error::Numerical(
            "no candidate learner could be cross-validated".into(),
        ));
    };
    let model = candidates[c].fit(x, y, seeds::derive(refit_seed, c as u64))?;
    Ok((
        model,
        Selection {
            chosen: candidates[c].name().into(),
            cv_mse: scores,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn singleton_set_is_plain_linear_fit() {
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * 5 + j * 3) % 7) as f64);
        let y: Vec<f64> = (0..30).map(|i| (i % 4) as f64 * 0.3).collect();
        let sel = select_learner(LearnerSet::L1, &x, &y, 5, 9).unwrap();
        let lin = fit_ols(&x, &y).unwrap();
        assert_eq!(sel.predict(&x).unwrap(), lin.predict(&x).unwrap());
    }

    fn choice(set: LearnerSet, f: impl Fn(f64) -> f64, seed: u64) -> String {
        let mut rng = seeds::rng(seed);
        let n = 300;
        let x = DMatrix::from_fn(n, 1, |_, _| 4.0 * rng.random::<f64>() - 2.0);
        let y: Vec<f64> = (0..n)
            .map(|i| f(x[(i, 0)]) + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        select_learner_with(set, &x, &y, &SelectOptions::default(), seed)
            .unwrap()
            .1
            .chosen
    }

    #[test]
    fn linear_data_prefers_linear() {
        let wins = (0..10)
            .filter(|&s| choice(LearnerSet::L2, |x| 1.0 + 2.0 * x, s) == "linear")
            .count();
        assert!(wins >= 9, "{wins}");
    }

    #[test]
    fn oscillating_data_prefers_forest() {
        let wins = (0..10)
            .filter(|&s| choice(LearnerSet::L2, |x| (4.0 * x).sin(), s) == "forest")
            .count();
        assert!(wins >= 9, "{wins}");
    }
}
