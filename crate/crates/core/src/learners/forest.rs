//! Bagged CART regression forests with out-of-bag predictions.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{bootstrap_rows, RegressionTree, TreeParams};
use super::{FittedModel, Learner, Predict};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestSpec {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Features tried per split; all when `None`, clamped to the column count.
    pub mtry: Option<usize>,
    /// Rows drawn per tree as a fraction of n.
    pub sample_fraction: f64,
    /// Bootstrap (with replacement) or subsample without replacement.
    pub replace: bool,
    pub max_depth: Option<usize>,
    /// Share of each causal-tree subsample used for splitting; the rest
    /// estimates leaf effects. Ignored by regression forests.
    pub honest_fraction: f64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self {
            n_trees: 500,
            min_leaf: 5,
            mtry: None,
            sample_fraction: 1.0,
            replace: true,
            max_depth: None,
            honest_fraction: 0.5,
        }
    }
}

impl ForestSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(Error::LearnerSpec("trees and min_leaf must be >= 1".into()));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::LearnerSpec("sample fraction must lie in (0, 1]".into()));
        }
        if !(self.honest_fraction > 0.0 && self.honest_fraction < 1.0) {
            return Err(Error::LearnerSpec("honest fraction must lie in (0, 1)".into()));
        }
        if self.mtry == Some(0) {
            return Err(Error::LearnerSpec("mtry must be >= 1".into()));
        }
        if self.min_leaf > n {
            return Err(Error::Learner(format!("min_leaf {} exceeds n = {n}", self.min_leaf)));
        }
        Ok(())
    }

    pub(crate) fn tree_params(&self) -> TreeParams {
        TreeParams { min_leaf: self.min_leaf, max_depth: self.max_depth, mtry: self.mtry }
    }

    pub(crate) fn draws(&self, n: usize) -> usize {
        ((n as f64 * self.sample_fraction).round() as usize).clamp(1, n)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionForest {
    pub trees: Vec<RegressionTree>,
}

impl Predict for RegressionForest {
    fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }
}

pub fn fit_forest(x: ArrayView2<f64>, y: ArrayView1<f64>, spec: &ForestSpec, seed: u64) -> Result<FittedModel> {
    let n = y.len();
    if n < 2 {
        return Err(Error::Learner("forest needs n >= 2".into()));
    }
    spec.validate(n)?;
    let yv = y.to_vec();
    let params = spec.tree_params();
    let draws = spec.draws(n);
    let grown: Vec<(RegressionTree, Vec<bool>)> = (0..spec.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[t as u64]);
            let rows = if spec.replace {
                bootstrap_rows(n, draws, &mut r)
            } else {
                sample_indices(&mut r, n, draws).into_vec()
            };
            let mut in_bag = vec![false; n];
            rows.iter().for_each(|&i| in_bag[i] = true);
            (RegressionTree::fit(x, &yv, &rows, &params, &mut r), in_bag)
        })
        .collect();

    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            sums[i] += tree.predict_row(x.row(i));
            counts[i] += 1;
        }
    }
    let oob = (0..n).map(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64)).collect();
    let forest = RegressionForest { trees: grown.into_iter().map(|(t, _)| t).collect() };
    Ok(FittedModel::new("forest", forest).with_oob(oob))
}

impl Learner for ForestSpec {
    fn name(&self) -> &'static str {
        "forest"
    }

    fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>, seed: u64) -> Result<FittedModel> {
        fit_forest(x, y, self, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::Rng;

    #[test]
    fn single_unsplittable_tree_predicts_mean() {
        let x = Array2::from_shape_fn((20, 2), |(i, j)| (i * (j + 2)) as f64);
        let y = Array1::from_shape_fn(20, |i| (i as f64).sin());
        let spec = ForestSpec { n_trees: 1, min_leaf: 20, replace: false, ..Default::default() };
        let m = fit_forest(x.view(), y.view(), &spec, 0).unwrap();
        let ybar = y.mean().unwrap();
        for i in 0..20 {
            assert!((m.predict_row(x.row(i)) - ybar).abs() < 1e-12);
        }
        // every row was in the single subsample
        assert!(m.oob_predictions.as_ref().unwrap().iter().all(Option::is_none));
        assert_eq!(m.oob_coverage(), 0);
    }

    #[test]
    fn rejects_oversized_leaves() {
        let x = Array2::zeros((4, 1));
        let y = Array1::zeros(4);
        let spec = ForestSpec { min_leaf: 5, ..Default::default() };
        assert!(fit_forest(x.view(), y.view(), &spec, 0).is_err());
    }

    #[test]
    fn step_function_is_learned() {
        let n = 2000;
        let mut r = rng::stream(3, &[]);
        let x = Array2::from_shape_fn((n, 2), |_| r.random::<f64>());
        let y = Array1::from_shape_fn(n, |i| if x[[i, 0]] > 0.5 { 1.0 } else { 0.0 });
        let spec = ForestSpec { n_trees: 200, min_leaf: 5, ..Default::default() };
        let m = fit_forest(x.view(), y.view(), &spec, 1).unwrap();
        let rmse = ((0..n).map(|i| (m.predict_row(x.row(i)) - y[i]).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(rmse <= 0.05, "rmse {rmse}");
        let oob = m.oob_predictions.as_ref().unwrap();
        assert!(oob.iter().all(Option::is_some));
    }

    #[test]
    fn same_seed_same_predictions() {
        let mut r = rng::stream(4, &[]);
        let x = Array2::from_shape_fn((200, 3), |_| r.random::<f64>());
        let y = Array1::from_shape_fn(200, |i| x[[i, 1]] + r.random::<f64>());
        let spec = ForestSpec { n_trees: 30, mtry: Some(2), ..Default::default() };
        let a = fit_forest(x.view(), y.view(), &spec, 9).unwrap();
        let b = fit_forest(x.view(), y.view(), &spec, 9).unwrap();
        for i in 0..200 {
            assert_eq!(a.predict_row(x.row(i)).to_bits(), b.predict_row(x.row(i)).to_bits());
        }
        assert_eq!(a.oob_predictions, b.oob_predictions);
    }
}
