//! Least-squares gradient boosting with shallow trees.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::tree::{RegressionTree, TreeParams};
use super::{FittedModel, Learner, Predict};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostSpec {
    pub n_trees: usize,
    pub depth: usize,
    pub shrinkage: f64,
    /// Row fraction per round; 1.0 disables stochastic boosting.
    pub subsample: f64,
    pub min_leaf: usize,
}

impl Default for BoostSpec {
    fn default() -> Self {
        Self { n_trees: 300, depth: 2, shrinkage: 0.1, subsample: 1.0, min_leaf: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostedTrees {
    pub base: f64,
    pub shrinkage: f64,
    pub trees: Vec<RegressionTree>,
    /// Training residual sum of squares after each round, starting at the
    /// intercept-only fit.
    pub residual_ss: Vec<f64>,
}

impl Predict for BoostedTrees {
    fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        self.base + self.shrinkage * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }
}

pub fn fit_boost_model(x: ArrayView2<f64>, y: ArrayView1<f64>, spec: &BoostSpec, seed: u64) -> Result<BoostedTrees> {
    let n = y.len();
    if n < 2 {
        return Err(Error::Learner("boosting needs n >= 2".into()));
    }
    if !(spec.shrinkage > 0.0 && spec.shrinkage <= 1.0) {
        return Err(Error::LearnerSpec("shrinkage must lie in (0, 1]".into()));
    }
    if !(spec.subsample > 0.0 && spec.subsample <= 1.0) || spec.min_leaf == 0 {
        return Err(Error::LearnerSpec("subsample must lie in (0, 1] and min_leaf >= 1".into()));
    }
    let params = TreeParams { min_leaf: spec.min_leaf, max_depth: Some(spec.depth), mtry: None };
    let base = y.mean().unwrap_or(0.0);
    let mut fitted = vec![base; n];
    let mut resid: Vec<f64> = y.iter().map(|v| v - base).collect();
    let mut residual_ss = vec![resid.iter().map(|r| r * r).sum()];
    let all: Vec<usize> = (0..n).collect();
    let draws = ((n as f64 * spec.subsample).round() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(spec.n_trees);
    for t in 0..spec.n_trees {
        let mut r = rng::stream(seed, &[t as u64]);
        let rows = if draws < n { sample_indices(&mut r, n, draws).into_vec() } else { all.clone() };
        let tree = RegressionTree::fit(x, &resid, &rows, &params, &mut r);
        for i in 0..n {
            fitted[i] += spec.shrinkage * tree.predict_row(x.row(i));
            resid[i] = y[i] - fitted[i];
        }
        residual_ss.push(resid.iter().map(|r| r * r).sum());
        trees.push(tree);
    }
    Ok(BoostedTrees { base, shrinkage: spec.shrinkage, trees, residual_ss })
}

impl Learner for BoostSpec {
    fn name(&self) -> &'static str {
        "boost"
    }

    fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>, seed: u64) -> Result<FittedModel> {
        Ok(FittedModel::new("boost", fit_boost_model(x, y, self, seed)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::Rng;

    #[test]
    fn residuals_shrink_every_round() {
        let mut r = rng::stream(1, &[]);
        let x = Array2::from_shape_fn((300, 3), |_| r.random::<f64>());
        let y = Array1::from_shape_fn(300, |i| (6.0 * x[[i, 0]]).sin() + x[[i, 1]] + 0.3 * r.random::<f64>());
        let m = fit_boost_model(x.view(), y.view(), &BoostSpec { n_trees: 80, ..Default::default() }, 0).unwrap();
        assert!(m.residual_ss.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(*m.residual_ss.last().unwrap() < 0.3 * m.residual_ss[0]);
    }

    #[test]
    fn depth_zero_stays_at_the_mean() {
        let x = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let y = Array1::from_shape_fn(10, |i| (i * i) as f64);
        let spec = BoostSpec { n_trees: 5, depth: 0, ..Default::default() };
        let m = fit_boost_model(x.view(), y.view(), &spec, 0).unwrap();
        let ybar = y.mean().unwrap();
        assert!((m.predict_row(x.row(3)) - ybar).abs() < 1e-9);
    }

    #[test]
    fn bad_shrinkage_rejected() {
        let x = Array2::zeros((5, 1));
        let y = Array1::zeros(5);
        let spec = BoostSpec { shrinkage: 0.0, ..Default::default() };
        assert!(fit_boost_model(x.view(), y.view(), &spec, 0).is_err());
    }
}
