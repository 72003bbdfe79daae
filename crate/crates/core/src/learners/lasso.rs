//! L1-penalised least squares by cyclic coordinate descent.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FittedModel, Learner, Predict};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_MAX_COLUMNS: usize = 20_000;
const TOLERANCE: f64 = 1e-7;
const MAX_SWEEPS: usize = 10_000;
const GRAM_MAX_COLUMNS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaChoice {
    /// Cross-validate over a log-spaced path below the full-shrinkage threshold.
    Auto { n_lambda: usize, ratio: f64 },
    Fixed(f64),
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSpec {
    pub lambda: LambdaChoice,
    /// 1 = main effects, 2 adds pairwise products, 3 adds triple products.
    pub interaction_order: u8,
    pub standardize: bool,
    pub folds: usize,
    pub max_columns: usize,
}

impl Default for LassoSpec {
    fn default() -> Self {
        Self {
            lambda: LambdaChoice::Auto { n_lambda: 30, ratio: 1e-3 },
            interaction_order: 1,
            standardize: true,
            folds: 5,
            max_columns: DEFAULT_MAX_COLUMNS,
        }
    }
}

/// Column products making up the expanded design (each entry lists the
/// source columns multiplied together).
pub fn interaction_terms(p: usize, order: u8) -> Vec<Vec<usize>> {
    let mut terms: Vec<Vec<usize>> = (0..p).map(|j| vec![j]).collect();
    if order >= 2 {
        for a in 0..p {
            for b in a + 1..p {
                terms.push(vec![a, b]);
            }
        }
    }
    if order >= 3 {
        for a in 0..p {
            for b in a + 1..p {
                for c in b + 1..p {
                    terms.push(vec![a, b, c]);
                }
            }
        }
    }
    terms
}

fn expand(x: ArrayView2<f64>, terms: &[Vec<usize>]) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), terms.len()), |(i, t)| terms[t].iter().map(|&j| x[[i, j]]).product())
}

/// Centered (and optionally scaled) design in column-major storage.
struct Design {
    cols: Vec<Vec<f64>>,
    means: Vec<f64>,
    scales: Vec<f64>,
    /// x_j' x_j / n for each centered column.
    norms: Vec<f64>,
    kept: Vec<usize>,
}

impl Design {
    fn new(x: &Array2<f64>, standardize: bool) -> Design {
        let n = x.nrows() as f64;
        let mut d = Design { cols: vec![], means: vec![], scales: vec![], norms: vec![], kept: vec![] };
        for j in 0..x.ncols() {
            let col = x.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if !(var > 1e-14 * (1.0 + mean * mean)) {
                continue;
            }
            let scale = if standardize { var.sqrt() } else { 1.0 };
            d.cols.push(col.iter().map(|v| (v - mean) / scale).collect());
            d.means.push(mean);
            d.scales.push(scale);
            d.norms.push(var / (scale * scale));
            d.kept.push(j);
        }
        d
    }
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Centered response paired with a design. Narrow designs keep the Gram
/// matrix so a sweep costs O(p^2) instead of O(np).
struct Problem<'a> {
    design: &'a Design,
    yc: &'a [f64],
    /// x_j' y / n
    xty: Vec<f64>,
    yty: f64,
    gram: Option<Vec<f64>>,
}

impl<'a> Problem<'a> {
    fn new(design: &'a Design, yc: &'a [f64]) -> Self {
        let n = yc.len() as f64;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
        let xty = design.cols.iter().map(|c| dot(c, yc)).collect();
        let p = design.cols.len();
        let gram = (p <= GRAM_MAX_COLUMNS.min(yc.len())).then(|| {
            let mut g = vec![0.0; p * p];
            for j in 0..p {
                for k in j..p {
                    let v = if j == k { design.norms[j] } else { dot(&design.cols[j], &design.cols[k]) };
                    g[j * p + k] = v;
                    g[k * p + j] = v;
                }
            }
            g
        });
        Problem { design, yc, xty, yty: dot(yc, yc), gram }
    }

    fn lambda_max(&self) -> f64 {
        self.xty.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Solve min (1/2n)||y - Xb||^2 + lambda ||b||_1, warm-started at `b`.
    /// Returns the objective after each sweep.
    fn solve(&self, lambda: f64, b: &mut [f64]) -> Vec<f64> {
        match &self.gram {
            Some(g) => self.solve_gram(g, lambda, b),
            None => self.solve_residual(lambda, b),
        }
    }

    fn solve_gram(&self, g: &[f64], lambda: f64, b: &mut [f64]) -> Vec<f64> {
        let p = b.len();
        let norms = &self.design.norms;
        let mut gb: Vec<f64> = (0..p).map(|j| (0..p).map(|k| g[j * p + k] * b[k]).sum()).collect();
        let objective = |b: &[f64], gb: &[f64]| {
            let fit: f64 = (0..p).map(|j| b[j] * (gb[j] - 2.0 * self.xty[j])).sum();
            (0.5 * (self.yty + fit)).max(0.0) + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
        };
        let mut trace = vec![objective(b, &gb)];
        for _ in 0..MAX_SWEEPS {
            let mut max_change = 0.0f64;
            for j in 0..p {
                let rho = self.xty[j] - gb[j] + norms[j] * b[j];
                let new = soft_threshold(rho, lambda) / norms[j];
                let delta = new - b[j];
                if delta != 0.0 {
                    let row = &g[j * p..(j + 1) * p];
                    gb.iter_mut().zip(row).for_each(|(v, gjk)| *v += delta * gjk);
                    b[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            trace.push(objective(b, &gb));
            if max_change < TOLERANCE {
                break;
            }
        }
        trace
    }

    fn solve_residual(&self, lambda: f64, b: &mut [f64]) -> Vec<f64> {
        let design = self.design;
        let n = self.yc.len() as f64;
        let mut resid: Vec<f64> = self.yc.to_vec();
        for (j, col) in design.cols.iter().enumerate() {
            if b[j] != 0.0 {
                resid.iter_mut().zip(col).for_each(|(r, x)| *r -= b[j] * x);
            }
        }
        let objective = |resid: &[f64], b: &[f64]| {
            resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * n) + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
        };
        let mut trace = vec![objective(&resid, b)];
        for _ in 0..MAX_SWEEPS {
            let mut max_change = 0.0f64;
            for (j, col) in design.cols.iter().enumerate() {
                let rho = col.iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / n + design.norms[j] * b[j];
                let new = soft_threshold(rho, lambda) / design.norms[j];
                let delta = new - b[j];
                if delta != 0.0 {
                    resid.iter_mut().zip(col).for_each(|(r, x)| *r -= delta * x);
                    b[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            trace.push(objective(&resid, b));
            if max_change < TOLERANCE {
                break;
            }
        }
        trace
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoModel {
    pub intercept: f64,
    /// Coefficients on the original (expanded) column scale.
    pub coefficients: Vec<f64>,
    pub terms: Vec<Vec<usize>>,
    pub lambda: f64,
    /// Objective value after each sweep of the final fit.
    pub objective_trace: Vec<f64>,
}

impl Predict for LassoModel {
    fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        self.intercept
            + self
                .terms
                .iter()
                .zip(&self.coefficients)
                .filter(|(_, &c)| c != 0.0)
                .map(|(t, c)| c * t.iter().map(|&j| row[j]).product::<f64>())
                .sum::<f64>()
    }
}

impl LassoModel {
    /// Largest penalty with a non-zero slope for this design and response.
    pub fn lambda_max(x: ArrayView2<f64>, y: ArrayView1<f64>, spec: &LassoSpec) -> Result<f64> {
        let (design, yc, _) = prepare(x, y, spec)?;
        Ok(Problem::new(&design, &yc).lambda_max())
    }
}

fn prepare(x: ArrayView2<f64>, y: ArrayView1<f64>, spec: &LassoSpec) -> Result<(Design, Vec<f64>, Vec<Vec<usize>>)> {
    let terms = interaction_terms(x.ncols(), spec.interaction_order);
    if terms.len() > spec.max_columns {
        return Err(Error::LearnerSpec(format!(
            "interaction expansion has {} columns, cap is {}",
            terms.len(),
            spec.max_columns
        )));
    }
    let design = Design::new(&expand(x, &terms), spec.standardize);
    if design.cols.is_empty() {
        return Err(Error::Learner("lasso: every covariate column is constant".into()));
    }
    let ybar = y.mean().unwrap_or(0.0);
    let yc = y.iter().map(|v| v - ybar).collect();
    Ok((design, yc, terms))
}

fn to_model(design: &Design, b: &[f64], ybar: f64, terms: Vec<Vec<usize>>, lambda: f64, trace: Vec<f64>) -> LassoModel {
    let mut coefficients = vec![0.0; terms.len()];
    let mut intercept = ybar;
    for (k, &j) in design.kept.iter().enumerate() {
        let c = b[k] / design.scales[k];
        coefficients[j] = c;
        intercept -= c * design.means[k];
    }
    LassoModel { intercept, coefficients, terms, lambda, objective_trace: trace }
}

/// Fit at a single penalty.
pub fn fit_lasso_fixed(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64, spec: &LassoSpec) -> Result<LassoModel> {
    if y.len() < 2 {
        return Err(Error::Learner("lasso needs n >= 2".into()));
    }
    let (design, yc, terms) = prepare(x, y, spec)?;
    let mut b = vec![0.0; design.cols.len()];
    let trace = Problem::new(&design, &yc).solve(lambda, &mut b);
    Ok(to_model(&design, &b, y.mean().unwrap_or(0.0), terms, lambda, trace))
}

fn path_lambdas(spec: &LassoSpec, lmax: f64) -> Vec<f64> {
    let mut grid = match &spec.lambda {
        LambdaChoice::Fixed(l) => vec![*l],
        LambdaChoice::Grid(g) => g.clone(),
        LambdaChoice::Auto { n_lambda, ratio } => {
            let top = lmax.max(1e-12);
            let m = (*n_lambda).max(2);
            (0..m).map(|k| top * ratio.powf(k as f64 / (m - 1) as f64)).collect()
        }
    };
    // descending order lets each fit warm-start from the previous one
    grid.sort_by(|a, b| b.total_cmp(a));
    grid
}

/// Cross-validated lasso (`lambda` grid or automatic path), refit on all rows.
pub fn fit_lasso(x: ArrayView2<f64>, y: ArrayView1<f64>, spec: &LassoSpec, seed: u64) -> Result<FittedModel> {
    let n = y.len();
    if n < 2 {
        return Err(Error::Learner("lasso needs n >= 2".into()));
    }
    let (design, yc, terms) = prepare(x, y, spec)?;
    let problem = Problem::new(&design, &yc);
    let lambdas = path_lambdas(spec, problem.lambda_max());
    let (lambda, cv_rmse) = if lambdas.len() == 1 || n < 2 * spec.folds.max(2) {
        (lambdas[lambdas.len() - 1], None)
    } else {
        let folds = spec.folds.max(2);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, &[0x1a55]));
        let mut sse = vec![0.0; lambdas.len()];
        for f in 0..folds {
            let test: Vec<usize> = perm.iter().enumerate().filter(|(p, _)| p % folds == f).map(|(_, &i)| i).collect();
            let train: Vec<usize> = perm.iter().enumerate().filter(|(p, _)| p % folds != f).map(|(_, &i)| i).collect();
            let xt = x.select(ndarray::Axis(0), &train);
            let yt = y.select(ndarray::Axis(0), &train);
            let Ok((d, ytc, terms_t)) = prepare(xt.view(), yt.view(), spec) else {
                // a fold whose design collapses predicts its training mean
                let m = yt.mean().unwrap_or(0.0);
                let e: f64 = test.iter().map(|&i| (y[i] - m).powi(2)).sum();
                sse.iter_mut().for_each(|s| *s += e);
                continue;
            };
            let ybar = yt.mean().unwrap_or(0.0);
            // held-out rows on the training fold's centred and scaled columns
            let raw = expand(x.select(ndarray::Axis(0), &test).view(), &terms_t);
            let held: Vec<Vec<f64>> = d
                .kept
                .iter()
                .enumerate()
                .map(|(k, &j)| raw.column(j).iter().map(|v| (v - d.means[k]) / d.scales[k]).collect())
                .collect();
            let fold = Problem::new(&d, &ytc);
            let mut b = vec![0.0; d.cols.len()];
            let mut pred = vec![0.0; test.len()];
            for (k, &lam) in lambdas.iter().enumerate() {
                fold.solve(lam, &mut b);
                pred.fill(ybar);
                for (bj, col) in b.iter().zip(&held).filter(|(bj, _)| **bj != 0.0) {
                    pred.iter_mut().zip(col).for_each(|(p, v)| *p += bj * v);
                }
                sse[k] += test.iter().zip(&pred).map(|(&i, p)| (y[i] - p).powi(2)).sum::<f64>();
            }
        }
        let (best, best_sse) = sse
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc });
        (lambdas[best], Some((best_sse / n as f64).sqrt()))
    };
    let mut b = vec![0.0; design.cols.len()];
    for &lam in lambdas.iter().filter(|&&l| l >= lambda) {
        problem.solve(lam, &mut b);
    }
    let trace = problem.solve(lambda, &mut b);
    let model = to_model(&design, &b, y.mean().unwrap_or(0.0), terms, lambda, trace);
    Ok(FittedModel::new("lasso", model).with_cv_rmse(cv_rmse))
}

impl Learner for LassoSpec {
    fn name(&self) -> &'static str {
        "lasso"
    }

    fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>, seed: u64) -> Result<FittedModel> {
        fit_lasso(x, y, self, seed)
    }
}
