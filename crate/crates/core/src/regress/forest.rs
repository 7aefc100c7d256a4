//! Random regression forest: bagged CART trees with per-node feature sampling.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Regressor;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(p / 3)`.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            min_leaf: 5,
            mtry: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
    /// Out-of-bag mean squared error, when any sample was left out.
    pub oob_mse: Option<f64>,
}

impl Regressor for Forest {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "forest has {} inputs, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        let mut row = vec![0.0; x.ncols()];
        Ok(DVector::from_iterator(
            x.nrows(),
            (0..x.nrows()).map(|i| {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = x[(i, j)];
                }
                self.trees.iter().map(|t| t.predict(&row)).sum::<f64>() / self.trees.len() as f64
            }),
        ))
    }
}

struct Builder<'a> {
    /// Column-major copy of the inputs for cache-friendly scans.
    cols: Vec<Vec<f64>>,
    y: &'a [f64],
    min_leaf: usize,
    mtry: usize,
}

impl Builder<'_> {
    fn build<R: Rng>(&self, idx: &mut [usize], rng: &mut R) -> Tree {
        let mut nodes = Vec::new();
        self.grow(idx, rng, &mut nodes);
        Tree { nodes }
    }

    fn grow<R: Rng>(&self, idx: &mut [usize], rng: &mut R, nodes: &mut Vec<Node>) -> usize {
        let me = nodes.len();
        let n = idx.len();
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n as f64;
        nodes.push(Node::Leaf(mean));
        if n < 2 * self.min_leaf || idx.iter().all(|&i| self.y[i] == self.y[idx[0]]) {
            return me;
        }
        let Some((feature, threshold)) = self.best_split(idx, rng) else {
            return me;
        };
        let col = &self.cols[feature];
        let mut mid = 0;
        for k in 0..n {
            if col[idx[k]] <= threshold {
                idx.swap(k, mid);
                mid += 1;
            }
        }
        let (l, r) = idx.split_at_mut(mid);
        let left = self.grow(l, rng, nodes);
        let right = self.grow(r, rng, nodes);
        nodes[me] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        me
    }

    fn best_split<R: Rng>(&self, idx: &[usize], rng: &mut R) -> Option<(usize, f64)> {
        let n = idx.len();
        let p = self.cols.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
        let mut features: Vec<usize> = sample(rng, p, self.mtry.min(p)).into_vec();
        features.sort_unstable();
        for f in features {
            let col = &self.cols[f];
            order.clear();
            order.extend(idx.iter().map(|&i| (col[i], self.y[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            if order[0].0 == order[n - 1].0 {
                continue;
            }
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += order[k].1;
                let nl = k + 1;
                let nr = n - nl;
                if nl < self.min_leaf {
                    continue;
                }
                if nr < self.min_leaf {
                    break;
                }
                if order[k].0 == order[k + 1].0 {
                    continue;
                }
                // maximizing this is equivalent to minimizing child SSE
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64;
                if best.is_none_or(|b| score > b.0) {
                    best = Some((score, f, 0.5 * (order[k].0 + order[k + 1].0)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

pub fn fit_forest(x: &DMatrix<f64>, y: &[f64], params: &ForestParams) -> Result<Forest> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} responses for {n} rows",
            y.len()
        )));
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(Error::InvalidParameter(
            "n_trees and min_leaf must be positive".into(),
        ));
    }
    if n < params.min_leaf {
        return Err(Error::InvalidParameter(format!(
            "{n} rows is fewer than min_leaf = {}",
            params.min_leaf
        )));
    }
    let builder = Builder {
        cols: (0..p)
            .map(|j| x.column(j).iter().copied().collect())
            .collect(),
        y,
        min_leaf: params.min_leaf,
        mtry: params.mtry.unwrap_or(p.div_ceil(3)).max(1),
    };
    let mut oob_sum = vec![0.0; n];
    let mut oob_count = vec![0usize; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut row = vec![0.0; p];
    for t in 0..params.n_trees {
        let mut rng = seeds::rng(seeds::derive(params.seed, t as u64));
        let mut idx: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut in_bag = vec![false; n];
        for &i in &idx {
            in_bag[i] = true;
        }
        let tree = builder.build(&mut idx, &mut rng);
        for i in (0..n).filter(|&i| !in_bag[i]) {
            for (j, r) in row.iter_mut().enumerate() {
                *r = x[(i, j)];
            }
            oob_sum[i] += tree.predict(&row);
            oob_count[i] += 1;
        }
        trees.push(tree);
    }
    let scored: Vec<f64> = (0..n)
        .filter(|&i| oob_count[i] > 0)
        .map(|i| (oob_sum[i] / oob_count[i] as f64 - y[i]).powi(2))
        .collect();
    let oob_mse = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(Forest {
        trees,
        n_features: p,
        oob_mse,
    })
}
