//! Honest causal forests: trees split on one half of a subsample and
//! estimate within-leaf treatment-control mean differences on the other.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forest::ForestSpec;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForestSpec {
    pub n_trees: usize,
    /// Minimum splitting-sample rows per child.
    pub min_leaf: usize,
    pub mtry: Option<usize>,
    /// Rows drawn without replacement per tree, as a fraction of n.
    pub sample_fraction: f64,
    pub honest_fraction: f64,
    pub max_depth: Option<usize>,
}

impl Default for CausalForestSpec {
    fn default() -> Self {
        Self { n_trees: 500, min_leaf: 5, mtry: None, sample_fraction: 0.5, honest_fraction: 0.5, max_depth: None }
    }
}

impl From<&ForestSpec> for CausalForestSpec {
    fn from(f: &ForestSpec) -> Self {
        Self {
            n_trees: f.n_trees,
            min_leaf: f.min_leaf,
            mtry: f.mtry,
            // bootstrap draws have no out-of-bag-free honest split; halve instead
            sample_fraction: if f.replace { 0.5 } else { f.sample_fraction },
            honest_fraction: f.honest_fraction,
            max_depth: f.max_depth,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalNode {
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Treated minus control mean on the estimation rows reaching the node.
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalTree {
    pub nodes: Vec<CausalNode>,
}

impl CausalTree {
    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let mut id = 0;
        while let Some(f) = self.nodes[id].feature {
            id = if row[f] <= self.nodes[id].threshold { self.nodes[id].left } else { self.nodes[id].right };
        }
        self.nodes[id].tau
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature.is_none()).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalForestModel {
    pub trees: Vec<CausalTree>,
    /// Out-of-bag CATE per training row. Rows sampled by every tree fall back
    /// to the full-forest prediction and are counted in `oob_missing`.
    pub tau_oob: Vec<f64>,
    pub oob_counts: Vec<usize>,
    pub oob_missing: usize,
}

impl CausalForestModel {
    pub fn predict_tau(&self, row: ArrayView1<f64>) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }
}

#[derive(Default, Clone, Copy)]
struct ArmSums {
    n1: usize,
    s1: f64,
    n0: usize,
    s0: f64,
}

impl ArmSums {
    fn add(&mut self, treated: bool, y: f64) {
        if treated {
            self.n1 += 1;
            self.s1 += y;
        } else {
            self.n0 += 1;
            self.s0 += y;
        }
    }

    fn minus(&self, o: &ArmSums) -> ArmSums {
        ArmSums { n1: self.n1 - o.n1, s1: self.s1 - o.s1, n0: self.n0 - o.n0, s0: self.s0 - o.s0 }
    }

    fn both_arms(&self) -> bool {
        self.n1 > 0 && self.n0 > 0
    }

    fn tau(&self) -> f64 {
        self.s1 / self.n1 as f64 - self.s0 / self.n0 as f64
    }

    fn n(&self) -> usize {
        self.n1 + self.n0
    }
}

fn sums(rows: &[usize], w: &[bool], y: &[f64]) -> ArmSums {
    let mut s = ArmSums::default();
    rows.iter().for_each(|&i| s.add(w[i], y[i]));
    s
}

struct Grower<'a> {
    x: ArrayView2<'a, f64>,
    w: &'a [bool],
    y: &'a [f64],
    spec: &'a CausalForestSpec,
}

impl Grower<'_> {
    fn best_split(&self, split: &[usize], est: &[usize], features: &[usize]) -> Option<(usize, f64)> {
        let total = sums(split, self.w, self.y);
        let parent = total.n() as f64 * total.tau().powi(2);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut s_sorted = split.to_vec();
        let mut e_sorted = est.to_vec();
        for &f in features {
            let xf = |i: usize| self.x[[i, f]];
            s_sorted.sort_by(|&a, &b| xf(a).total_cmp(&xf(b)));
            e_sorted.sort_by(|&a, &b| xf(a).total_cmp(&xf(b)));
            let mut left = ArmSums::default();
            let (mut e_ptr, mut e1, mut e0) = (0usize, 0usize, 0usize);
            let (e1_tot, e0_tot) = est.iter().fold((0, 0), |(a, b), &i| if self.w[i] { (a + 1, b) } else { (a, b + 1) });
            for k in 1..s_sorted.len() {
                let prev = s_sorted[k - 1];
                left.add(self.w[prev], self.y[prev]);
                let (lo, hi) = (xf(prev), xf(s_sorted[k]));
                if hi <= lo {
                    continue;
                }
                if k < self.spec.min_leaf || s_sorted.len() - k < self.spec.min_leaf {
                    continue;
                }
                let right = total.minus(&left);
                if !left.both_arms() || !right.both_arms() {
                    continue;
                }
                let thr = 0.5 * (lo + hi);
                while e_ptr < e_sorted.len() && xf(e_sorted[e_ptr]) <= thr {
                    if self.w[e_sorted[e_ptr]] {
                        e1 += 1;
                    } else {
                        e0 += 1;
                    }
                    e_ptr += 1;
                }
                if e1 == 0 || e0 == 0 || e1 == e1_tot || e0 == e0_tot {
                    continue;
                }
                let score = left.n() as f64 * left.tau().powi(2) + right.n() as f64 * right.tau().powi(2);
                if score > parent && best.is_none_or(|b| score > b.2) {
                    best = Some((f, thr, score));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn grow(&self, split: Vec<usize>, est: Vec<usize>, rng: &mut StreamRng) -> CausalTree {
        let p = self.x.ncols();
        let mtry = self.spec.mtry.unwrap_or(p).clamp(1, p.max(1));
        let root_tau = sums(&est, self.w, self.y).tau();
        let mut nodes = vec![CausalNode { feature: None, threshold: 0.0, left: 0, right: 0, tau: root_tau }];
        let mut stack = vec![(0usize, 0usize, split, est)];
        while let Some((id, depth, s_rows, e_rows)) = stack.pop() {
            if self.spec.max_depth.is_some_and(|d| depth >= d) || p == 0 {
                continue;
            }
            let features: Vec<usize> = if mtry < p { sample_indices(rng, p, mtry).into_vec() } else { (0..p).collect() };
            let Some((f, thr)) = self.best_split(&s_rows, &e_rows, &features) else {
                continue;
            };
            let goes_left = |i: &usize| self.x[[*i, f]] <= thr;
            let (sl, sr): (Vec<usize>, Vec<usize>) = s_rows.iter().partition(|i| goes_left(i));
            let (el, er): (Vec<usize>, Vec<usize>) = e_rows.iter().partition(|i| goes_left(i));
            let l = nodes.len();
            for e in [&el, &er] {
                let tau = sums(e, self.w, self.y).tau();
                nodes.push(CausalNode { feature: None, threshold: 0.0, left: 0, right: 0, tau });
            }
            nodes[id].feature = Some(f);
            nodes[id].threshold = thr;
            nodes[id].left = l;
            nodes[id].right = l + 1;
            stack.push((l + 1, depth + 1, sr, er));
            stack.push((l, depth + 1, sl, el));
        }
        CausalTree { nodes }
    }
}

/// Split a subsample into splitting and estimation parts, each keeping both
/// treatment arms (stratified on `w`).
fn honest_split(rows: &[usize], w: &[bool], fraction: f64, rng: &mut StreamRng) -> (Vec<usize>, Vec<usize>) {
    let mut split = Vec::new();
    let mut est = Vec::new();
    for arm in [true, false] {
        let mut g: Vec<usize> = rows.iter().copied().filter(|&i| w[i] == arm).collect();
        g.shuffle(rng);
        let k = ((g.len() as f64 * fraction).round() as usize).clamp(1.min(g.len()), g.len().saturating_sub(1).max(1));
        split.extend_from_slice(&g[..k.min(g.len())]);
        est.extend_from_slice(&g[k.min(g.len())..]);
    }
    (split, est)
}

pub fn fit_causal_forest(
    x: ArrayView2<f64>,
    w: ArrayView1<f64>,
    y: ArrayView1<f64>,
    spec: &CausalForestSpec,
    seed: u64,
) -> Result<CausalForestModel> {
    let n = y.len();
    if w.len() != n || x.nrows() != n {
        return Err(Error::ShapeMismatch(format!("causal forest: x {} rows, w {}, y {n}", x.nrows(), w.len())));
    }
    if spec.n_trees == 0 || spec.min_leaf == 0 {
        return Err(Error::LearnerSpec("trees and min_leaf must be >= 1".into()));
    }
    if !(spec.honest_fraction > 0.0 && spec.honest_fraction < 1.0) {
        return Err(Error::LearnerSpec("honest fraction must lie in (0, 1)".into()));
    }
    if !(spec.sample_fraction > 0.0 && spec.sample_fraction < 1.0) {
        return Err(Error::LearnerSpec("causal forest sample fraction must lie in (0, 1)".into()));
    }
    let wb: Vec<bool> = w.iter().map(|&v| v == 1.0).collect();
    let n1 = wb.iter().filter(|&&b| b).count();
    if n1 < spec.min_leaf.max(2) || n - n1 < spec.min_leaf.max(2) {
        return Err(Error::Learner(format!("causal forest: arm sizes {n1}/{} below min_leaf {}", n - n1, spec.min_leaf)));
    }
    let yv = y.to_vec();
    let grower = Grower { x, w: &wb, y: &yv, spec };
    let draws = ((n as f64 * spec.sample_fraction).round() as usize).clamp(4, n);
    let grown: Vec<(CausalTree, Vec<usize>)> = (0..spec.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[t as u64]);
            let mut rows = sample_indices(&mut r, n, draws).into_vec();
            rows.sort_unstable();
            let (split, est) = honest_split(&rows, &wb, spec.honest_fraction, &mut r);
            let est_ok = est.iter().any(|&i| wb[i]) && est.iter().any(|&i| !wb[i]);
            let tree = if est_ok {
                grower.grow(split, est, &mut r)
            } else {
                // subsample lacks an arm in its estimation part: fall back to a
                // stump estimated on the whole subsample
                let tau = sums(&rows, &wb, &yv).tau();
                CausalTree { nodes: vec![CausalNode { feature: None, threshold: 0.0, left: 0, right: 0, tau }] }
            };
            (tree, rows)
        })
        .collect();

    let mut sums_oob = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut in_bag = vec![false; n];
    for (tree, rows) in &grown {
        rows.iter().for_each(|&i| in_bag[i] = true);
        for i in 0..n {
            if !in_bag[i] {
                sums_oob[i] += tree.predict_row(x.row(i));
                counts[i] += 1;
            }
        }
        rows.iter().for_each(|&i| in_bag[i] = false);
    }
    let model_trees: Vec<CausalTree> = grown.into_iter().map(|(t, _)| t).collect();
    let mut model = CausalForestModel { trees: model_trees, tau_oob: vec![0.0; n], oob_counts: counts, oob_missing: 0 };
    for (i, sum) in sums_oob.iter().enumerate() {
        model.tau_oob[i] = if model.oob_counts[i] > 0 {
            sum / model.oob_counts[i] as f64
        } else {
            model.oob_missing += 1;
            model.predict_tau(x.row(i))
        };
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dgp(n: usize, seed: u64, effect: impl Fn(f64) -> f64) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let mut r = rng::stream(seed, &[]);
        let x = Array2::from_shape_fn((n, 3), |_| r.random::<f64>() * 2.0 - 1.0);
        let w = Array1::from_shape_fn(n, |_| if r.random::<bool>() { 1.0 } else { 0.0 });
        let y = Array1::from_shape_fn(n, |i| {
            let e: f64 = StandardNormal.sample(&mut r);
            x[[i, 1]] + w[i] * effect(x[[i, 0]]) + e
        });
        (x, w, y)
    }

    fn spec(trees: usize) -> CausalForestSpec {
        CausalForestSpec { n_trees: trees, min_leaf: 20, ..Default::default() }
    }

    #[test]
    fn homogeneous_effect_is_recovered() {
        let n = 1000;
        let (x, w, y) = dgp(n, 1, |_| 2.0);
        let m = fit_causal_forest(x.view(), w.view(), y.view(), &spec(100), 5).unwrap();
        assert_eq!(m.tau_oob.len(), n);
        let mean = m.tau_oob.iter().sum::<f64>() / n as f64;
        // difference-in-means standard error with unit-ish noise per arm
        let se = (2.0f64 / (n as f64 / 2.0) * 1.4).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn null_effect() {
        let n = 1000;
        let (x, w, y) = dgp(n, 2, |_| 0.0);
        let m = fit_causal_forest(x.view(), w.view(), y.view(), &spec(100), 6).unwrap();
        let mean = m.tau_oob.iter().sum::<f64>() / n as f64;
        let se = (2.0f64 / (n as f64 / 2.0) * 1.4).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn two_region_sign_is_learned() {
        let (x, w, y) = dgp(4000, 3, |x1| if x1 > 0.0 { 1.0 } else { -1.0 });
        let m = fit_causal_forest(x.view(), w.view(), y.view(), &spec(100), 7).unwrap();
        let grid: Vec<f64> = (0..41).map(|k| -1.0 + 0.05 * k as f64).filter(|v| v.abs() > 1e-9).collect();
        let hits = grid
            .iter()
            .filter(|&&x1| {
                let row = ndarray::array![x1, 0.0, 0.0];
                m.predict_tau(row.view()).signum() == x1.signum()
            })
            .count();
        assert!(hits as f64 >= 0.9 * grid.len() as f64, "{hits}/{}", grid.len());
    }

    #[test]
    fn single_arm_is_rejected() {
        let x = Array2::zeros((50, 1));
        let w = Array1::ones(50);
        let y = Array1::zeros(50);
        assert!(fit_causal_forest(x.view(), w.view(), y.view(), &spec(5), 0).is_err());
    }

    #[test]
    fn leaves_hold_both_arms_and_are_deterministic() {
        let (x, w, y) = dgp(400, 4, |x1| x1);
        let a = fit_causal_forest(x.view(), w.view(), y.view(), &spec(20), 1).unwrap();
        let b = fit_causal_forest(x.view(), w.view(), y.view(), &spec(20), 1).unwrap();
        assert!(a.tau_oob.iter().all(|t| t.is_finite()));
        assert_eq!(a.tau_oob, b.tau_oob);
    }
}
