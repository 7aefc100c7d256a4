//! Two-period all-binary panel with an exact g-formula oracle and a
//! saturated cell-mean learner.

use std::collections::HashMap;

use dtr_core::panel::{Observation, Panel, Trajectory};
use dtr_core::regress::{Learner, Regressor};
use dtr_core::sem_sim::RegimeSpec;
use dtr_core::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Cell means keyed on the exact feature row.
pub struct Saturated;

pub struct CellMeans(HashMap<Vec<u64>, f64>);

fn key(x: &DMatrix<f64>, i: usize) -> Vec<u64> {
    x.row(i).iter().map(|v| v.to_bits()).collect()
}

impl Learner for Saturated {
    fn name(&self) -> String {
        "saturated".into()
    }

    fn fit(&self, x: &DMatrix<f64>, y: &[f64], _seed: u64) -> Result<Box<dyn Regressor>> {
        let mut acc: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
        for (i, v) in y.iter().enumerate() {
            let e = acc.entry(key(x, i)).or_insert((0.0, 0.0));
            e.0 += v;
            e.1 += 1.0;
        }
        Ok(Box::new(CellMeans(acc.into_iter().map(|(k, (s, n))| (k, s / n)).collect())))
    }
}

impl Regressor for CellMeans {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(x.nrows());
        for i in 0..x.nrows() {
            out[i] = *self
                .0
                .get(&key(x, i))
                .ok_or_else(|| Error::InvalidParameter("empty cell".into()))?;
        }
        Ok(out)
    }
}

pub const LOW_CD4: f64 = 200.0;
pub const HIGH_CD4: f64 = 1000.0;

pub fn cd4(bit: bool) -> [f64; 3] {
    [if bit { HIGH_CD4 } else { LOW_CD4 }, 0.5, 0.0]
}

/// Count of subjects with configuration `(l0, t0, l1, t1, y)`, where `l = 1`
/// is a high CD4 count.
pub fn toy_count(c: [bool; 5]) -> usize {
    let idx = c.iter().fold(0usize, |a, &b| 2 * a + usize::from(b));
    1 + (idx * 7 + 3) % 5 + 3 * usize::from(c[2] == c[1])
}

pub fn configurations() -> Vec<[bool; 5]> {
    (0..32u32).map(|b| std::array::from_fn(|j| b >> (4 - j) & 1 == 1)).collect()
}

pub fn toy_panel() -> Panel {
    let mut trajs = Vec::new();
    for c in configurations() {
        for _ in 0..toy_count(c) {
            let rec = |l: bool, t: Option<bool>, y: f64| Observation {
                l: Some(cd4(l)),
                censored: false,
                y: Some(y),
                t,
            };
            trajs.push(Trajectory {
                id: trajs.len() as u64,
                v: [0.0, 0.0, 1.0],
                records: vec![
                    rec(c[0], Some(c[1]), 0.0),
                    rec(c[2], Some(c[3]), 0.0),
                    rec(true, None, f64::from(u8::from(c[4]))),
                ],
            });
        }
    }
    Panel::new(1, trajs).unwrap()
}

/// Exhaustive g-formula over the toy's empirical law.
pub fn toy_g_formula(regime: RegimeSpec) -> f64 {
    let n = |f: &dyn Fn([bool; 5]) -> bool| -> f64 {
        configurations().into_iter().filter(|&c| f(c)).map(toy_count).sum::<usize>() as f64
    };
    let total = n(&|_| true);
    let mut g = 0.0;
    for l0 in [false, true] {
        let d0 = regime.decide(cd4(l0), false);
        let p_l0 = n(&|c| c[0] == l0) / total;
        let arm0 = n(&|c| c[0] == l0 && c[1] == d0);
        for l1 in [false, true] {
            let d1 = regime.decide(cd4(l1), d0);
            let p_l1 = n(&|c| c[0] == l0 && c[1] == d0 && c[2] == l1) / arm0;
            let cell = |c: [bool; 5]| c[0] == l0 && c[1] == d0 && c[2] == l1 && c[3] == d1;
            let ey = n(&|c| cell(c) && c[4]) / n(&cell);
            g += p_l0 * p_l1 * ey;
        }
    }
    g
}
