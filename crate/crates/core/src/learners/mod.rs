//! Nuisance-function learners behind a common trait, looked up by name.

pub mod boost;
pub mod causal_forest;
pub mod forest;
pub mod lasso;
pub mod tree;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use boost::BoostSpec;
pub use causal_forest::{fit_causal_forest, CausalForestModel, CausalForestSpec};
pub use forest::{fit_forest, ForestSpec};
pub use lasso::{fit_lasso, LambdaChoice, LassoSpec};

pub const DEFAULT_TRIM: f64 = 0.01;

/// A fitted regression function.
pub trait Predict: Send + Sync {
    fn predict_row(&self, row: ArrayView1<f64>) -> f64;
}

pub trait Learner: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>, seed: u64) -> Result<FittedModel>;
}

#[derive(Clone)]
pub struct FittedModel {
    pub name: &'static str,
    model: Arc<dyn Predict>,
    /// Forests only; `None` entries are rows that were in-bag for every tree.
    pub oob_predictions: Option<Vec<Option<f64>>>,
    pub training_rmse_cv: Option<f64>,
}

impl fmt::Debug for FittedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FittedModel")
            .field("name", &self.name)
            .field("training_rmse_cv", &self.training_rmse_cv)
            .finish_non_exhaustive()
    }
}

impl FittedModel {
    pub fn new(name: &'static str, model: impl Predict + 'static) -> Self {
        Self { name, model: Arc::new(model), oob_predictions: None, training_rmse_cv: None }
    }

    pub fn with_oob(mut self, oob: Vec<Option<f64>>) -> Self {
        self.oob_predictions = Some(oob);
        self
    }

    pub fn with_cv_rmse(mut self, rmse: Option<f64>) -> Self {
        self.training_rmse_cv = rmse;
        self
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        self.model.predict_row(row)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.rows().into_iter().map(|r| self.model.predict_row(r)).collect()
    }

    /// Rows with at least one out-of-bag tree.
    pub fn oob_coverage(&self) -> usize {
        self.oob_predictions.as_ref().map_or(0, |v| v.iter().filter(|p| p.is_some()).count())
    }
}

/// Intercept-only baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSpec;

struct Constant(f64);

impl Predict for Constant {
    fn predict_row(&self, _: ArrayView1<f64>) -> f64 {
        self.0
    }
}

impl Learner for MeanSpec {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn fit(&self, _x: ArrayView2<f64>, y: ArrayView1<f64>, _seed: u64) -> Result<FittedModel> {
        if y.is_empty() {
            return Err(Error::NoObservations);
        }
        let m = crate::stats::ordered_sum(&y.to_vec()) / y.len() as f64;
        Ok(FittedModel::new("mean", Constant(m)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerSpec {
    Mean,
    Lasso(LassoSpec),
    Forest(ForestSpec),
    Boost(BoostSpec),
}

impl LearnerSpec {
    pub fn learner(&self) -> &dyn Learner {
        match self {
            LearnerSpec::Mean => &MeanSpec,
            LearnerSpec::Lasso(s) => s,
            LearnerSpec::Forest(s) => s,
            LearnerSpec::Boost(s) => s,
        }
    }

    pub fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>, seed: u64) -> Result<FittedModel> {
        self.learner().fit(x, y, seed)
    }

    pub fn name(&self) -> &'static str {
        self.learner().name()
    }

    /// Parse `name[:key=value,...]` against the default registry.
    pub fn parse(text: &str) -> Result<Self> {
        LearnerRegistry::default().parse(text)
    }
}

impl std::str::FromStr for LearnerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

pub type Options = BTreeMap<String, String>;

/// Builds a learner spec from `key=value` options.
pub trait LearnerFactory: Send + Sync {
    fn build(&self, options: &Options) -> Result<LearnerSpec>;
    fn keys(&self) -> &'static [&'static str];
}

fn opt<T: std::str::FromStr>(options: &Options, key: &str) -> Result<Option<T>> {
    options
        .get(key)
        .map(|v| v.parse::<T>().map_err(|_| Error::LearnerSpec(format!("bad value for {key}: {v}"))))
        .transpose()
}

struct MeanFactory;
struct LassoFactory;
struct ForestFactory;
struct BoostFactory;

impl LearnerFactory for MeanFactory {
    fn build(&self, _: &Options) -> Result<LearnerSpec> {
        Ok(LearnerSpec::Mean)
    }

    fn keys(&self) -> &'static [&'static str] {
        &[]
    }
}

impl LearnerFactory for LassoFactory {
    fn build(&self, o: &Options) -> Result<LearnerSpec> {
        let mut s = LassoSpec::default();
        if let Some(order) = opt::<u8>(o, "order")? {
            if !(1..=3).contains(&order) {
                return Err(Error::LearnerSpec(format!("interaction order must be 1, 2 or 3, got {order}")));
            }
            s.interaction_order = order;
        }
        if let Some(l) = opt::<f64>(o, "lambda")? {
            if !(l >= 0.0) {
                return Err(Error::LearnerSpec("lambda must be >= 0".into()));
            }
            s.lambda = LambdaChoice::Fixed(l);
        }
        if let Some(g) = o.get("grid") {
            let grid = g
                .split('/')
                .map(|v| v.parse::<f64>().map_err(|_| Error::LearnerSpec(format!("bad lambda grid value {v}"))))
                .collect::<Result<Vec<_>>>()?;
            if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0)) {
                return Err(Error::LearnerSpec("lambda grid must be non-negative".into()));
            }
            s.lambda = LambdaChoice::Grid(grid);
        }
        if let Some(v) = opt(o, "folds")? {
            s.folds = v;
        }
        if let Some(v) = opt(o, "standardize")? {
            s.standardize = v;
        }
        if let Some(v) = opt(o, "maxcols")? {
            s.max_columns = v;
        }
        Ok(LearnerSpec::Lasso(s))
    }

    fn keys(&self) -> &'static [&'static str] {
        &["order", "lambda", "grid", "folds", "standardize", "maxcols"]
    }
}

impl LearnerFactory for ForestFactory {
    fn build(&self, o: &Options) -> Result<LearnerSpec> {
        let mut s = ForestSpec::default();
        if let Some(v) = opt(o, "trees")? {
            s.n_trees = v;
        }
        if let Some(v) = opt(o, "minleaf")? {
            s.min_leaf = v;
        }
        if let Some(v) = opt(o, "mtry")? {
            s.mtry = Some(v);
        }
        if let Some(v) = opt(o, "honest")? {
            s.honest_fraction = v;
        }
        if let Some(v) = opt(o, "fraction")? {
            s.sample_fraction = v;
        }
        if let Some(v) = opt(o, "replace")? {
            s.replace = v;
        }
        if let Some(v) = opt(o, "depth")? {
            s.max_depth = Some(v);
        }
        // n-independent checks; min_leaf against n is checked at fit time
        s.validate(usize::MAX)?;
        Ok(LearnerSpec::Forest(s))
    }

    fn keys(&self) -> &'static [&'static str] {
        &["trees", "minleaf", "mtry", "honest", "fraction", "replace", "depth"]
    }
}

impl LearnerFactory for BoostFactory {
    fn build(&self, o: &Options) -> Result<LearnerSpec> {
        let mut s = BoostSpec::default();
        if let Some(v) = opt(o, "trees")? {
            s.n_trees = v;
        }
        if let Some(v) = opt(o, "depth")? {
            s.depth = v;
        }
        if let Some(v) = opt(o, "shrinkage")? {
            s.shrinkage = v;
        }
        if let Some(v) = opt(o, "subsample")? {
            s.subsample = v;
        }
        if let Some(v) = opt(o, "minleaf")? {
            s.min_leaf = v;
        }
        if s.n_trees == 0 || s.min_leaf == 0 {
            return Err(Error::LearnerSpec("trees and min_leaf must be >= 1".into()));
        }
        if !(s.shrinkage > 0.0 && s.shrinkage <= 1.0) {
            return Err(Error::LearnerSpec("shrinkage must lie in (0, 1]".into()));
        }
        Ok(LearnerSpec::Boost(s))
    }

    fn keys(&self) -> &'static [&'static str] {
        &["trees", "depth", "shrinkage", "subsample", "minleaf"]
    }
}

/// Name-keyed table of learner factories.
pub struct LearnerRegistry {
    factories: BTreeMap<&'static str, Box<dyn LearnerFactory>>,
}

impl Default for LearnerRegistry {
    fn default() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("mean", Box::new(MeanFactory));
        r.register("lasso", Box::new(LassoFactory));
        r.register("forest", Box::new(ForestFactory));
        r.register("boost", Box::new(BoostFactory));
        r
    }
}

impl LearnerRegistry {
    pub fn register(&mut self, name: &'static str, factory: Box<dyn LearnerFactory>) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn parse(&self, text: &str) -> Result<LearnerSpec> {
        let (name, rest) = text.trim().split_once(':').unwrap_or((text.trim(), ""));
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::LearnerSpec(format!("unknown learner '{name}' (known: {})", self.names().join(", ")))
        })?;
        let mut options = Options::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::LearnerSpec(format!("expected key=value, got '{part}'")))?;
            if !factory.keys().contains(&k) {
                return Err(Error::LearnerSpec(format!("{name} has no option '{k}'")));
            }
            options.insert(k.to_string(), v.to_string());
        }
        factory.build(&options)
    }
}

/// Clamp propensity scores into `[eps, 1 - eps]`.
pub fn trim_propensity(p: &[f64], eps: f64) -> Vec<f64> {
    p.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub candidates: Vec<LearnerSpec>,
    pub rmse: Vec<f64>,
    pub folds: usize,
    pub best: usize,
}

/// Cross-fitted RMSE for each candidate; lowest wins, earlier candidates win ties.
pub fn select_learner(
    candidates: &[LearnerSpec],
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    folds: usize,
    seed: u64,
) -> Result<(LearnerSpec, CvReport)> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate learners"));
    }
    if folds < 2 {
        return Err(Error::invalid("selection needs at least 2 folds"));
    }
    let n = y.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[0x5e1]));
    let mut rmse = Vec::with_capacity(candidates.len());
    for (c, spec) in candidates.iter().enumerate() {
        let mut sse = 0.0;
        for f in 0..folds {
            let test: Vec<usize> = perm.iter().enumerate().filter(|(p, _)| p % folds == f).map(|(_, &i)| i).collect();
            let train: Vec<usize> = perm.iter().enumerate().filter(|(p, _)| p % folds != f).map(|(_, &i)| i).collect();
            let model = spec.fit(
                x.select(Axis(0), &train).view(),
                y.select(Axis(0), &train).view(),
                rng::derive_seed(seed, &[c as u64, f as u64]),
            )?;
            sse += test.iter().map(|&i| (y[i] - model.predict_row(x.row(i))).powi(2)).sum::<f64>();
        }
        rmse.push((sse / n as f64).sqrt());
    }
    let best = rmse
        .iter()
        .enumerate()
        .fold(0, |b, (k, &r)| if r < rmse[b] { k } else { b });
    Ok((candidates[best].clone(), CvReport { candidates: candidates.to_vec(), rmse, folds, best }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn trimming() {
        assert_eq!(trim_propensity(&[0.0, 0.5, 1.0], 0.01), vec![0.01, 0.5, 0.99]);
        assert_eq!(trim_propensity(&[0.3, 0.7], 0.01), vec![0.3, 0.7]);
        assert_eq!(trim_propensity(&[0.1], 0.25), vec![0.25]);
    }

    #[test]
    fn registry_parses_options() {
        match LearnerSpec::parse("forest:trees=500,minleaf=25,mtry=3").unwrap() {
            LearnerSpec::Forest(f) => {
                assert_eq!((f.n_trees, f.min_leaf, f.mtry), (500, 25, Some(3)));
            }
            other => panic!("{other:?}"),
        }
        match LearnerSpec::parse("lasso:order=2").unwrap() {
            LearnerSpec::Lasso(l) => assert_eq!(l.interaction_order, 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(LearnerSpec::parse("mean").unwrap(), LearnerSpec::Mean);
        assert!(LearnerSpec::parse("svm").is_err());
        assert!(LearnerSpec::parse("forest:leaves=3").is_err());
        assert!(LearnerSpec::parse("boost:shrinkage=0").is_err());
        assert!(LearnerSpec::parse("forest:honest=1").is_err());
        assert!(LearnerSpec::parse("lasso:order=4").is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = LearnerSpec::parse("boost:trees=100,depth=3").unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"boost\""));
        let back: LearnerSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn single_candidate_selection() {
        let x = Array2::from_shape_fn((40, 2), |(i, j)| (i + j) as f64);
        let y = Array1::from_shape_fn(40, |i| i as f64);
        let (best, report) = select_learner(&[LearnerSpec::Mean], x.view(), y.view(), 5, 0).unwrap();
        assert_eq!(best, LearnerSpec::Mean);
        assert_eq!(report.rmse.len(), 1);
        assert!(report.rmse[0] > 0.0);
    }

    #[test]
    fn lasso_beats_mean_on_linear_signal() {
        let mut r = rng::stream(1, &[]);
        let x = Array2::from_shape_fn((200, 4), |_| r.random::<f64>());
        let y = Array1::from_shape_fn(200, |i| 2.0 * x[[i, 0]] - x[[i, 2]] + 0.1 * r.random::<f64>());
        let cands = [LearnerSpec::Mean, LearnerSpec::Lasso(LassoSpec::default())];
        let (best, report) = select_learner(&cands, x.view(), y.view(), 5, 3).unwrap();
        assert_eq!(best.name(), "lasso");
        assert_eq!(report.best, 1);
    }
}
