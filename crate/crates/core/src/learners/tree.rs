//! CART regression trees: variance-reduction growth and weakest-link
//! cost-complexity pruning with cross-validated complexity selection.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Features drawn per split; all features when `None`.
    pub mtry: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { min_leaf: 5, max_depth: None, mtry: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Split feature; `None` for leaves.
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub value: f64,
    pub n: usize,
    /// Sum of squared deviations from `value` over the node's training rows.
    pub sse: f64,
    pub depth: usize,
}

impl TreeNode {
    fn leaf(value: f64, n: usize, sse: f64, depth: usize) -> Self {
        Self { feature: None, threshold: 0.0, left: 0, right: 0, value, n, sse, depth }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

/// Best variance-reduction split over `features`; returns (feature, threshold, gain).
fn best_split(
    x: ArrayView2<f64>,
    y: &[f64],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
    buf: &mut Vec<(f64, f64)>,
) -> Option<(usize, f64, f64)> {
    let n = rows.len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let base = total * total / n as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    for &f in features {
        buf.clear();
        buf.extend(rows.iter().map(|&i| (x[[i, f]], y[i])));
        buf.sort_by(|a, b| a.0.total_cmp(&b.0));
        if buf[0].0 == buf[n - 1].0 {
            continue;
        }
        let mut left = 0.0;
        for pos in 1..n {
            left += buf[pos - 1].1;
            if pos < min_leaf.max(1) || n - pos < min_leaf.max(1) || buf[pos - 1].0 == buf[pos].0 {
                continue;
            }
            let right = total - left;
            let gain = left * left / pos as f64 + right * right / (n - pos) as f64 - base;
            if best.is_none_or(|b| gain > b.2) {
                best = Some((f, 0.5 * (buf[pos - 1].0 + buf[pos].0), gain));
            }
        }
    }
    best
}

fn node_stats(y: &[f64], rows: &[usize]) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / n;
    let sse = rows.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    (mean, sse)
}

impl RegressionTree {
    /// Grow a tree on `rows` (repeats allowed, as in bootstrap samples).
    /// `rng` drives per-split feature sampling when `params.mtry` is set.
    pub fn fit(x: ArrayView2<f64>, y: &[f64], rows: &[usize], params: &TreeParams, rng: &mut StreamRng) -> Self {
        assert!(!rows.is_empty(), "cannot grow a tree on zero rows");
        let p = x.ncols();
        let mtry = params.mtry.unwrap_or(p).clamp(1, p.max(1));
        let mut buf = Vec::with_capacity(rows.len());
        let mut nodes = Vec::new();
        let (value, sse) = node_stats(y, rows);
        nodes.push(TreeNode::leaf(value, rows.len(), sse, 0));
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, rows.to_vec())];
        let all: Vec<usize> = (0..p).collect();
        while let Some((id, node_rows)) = stack.pop() {
            let depth = nodes[id].depth;
            if params.max_depth.is_some_and(|d| depth >= d) || p == 0 {
                continue;
            }
            let features: Vec<usize> = if mtry < p {
                sample_indices(rng, p, mtry).into_vec()
            } else {
                all.clone()
            };
            let Some((f, thr, gain)) = best_split(x, y, &node_rows, &features, params.min_leaf, &mut buf) else {
                continue;
            };
            if !(gain > 1e-12 * (1.0 + nodes[id].sse)) {
                continue;
            }
            let (l_rows, r_rows): (Vec<usize>, Vec<usize>) = node_rows.iter().partition(|&&i| x[[i, f]] <= thr);
            let (lv, ls) = node_stats(y, &l_rows);
            let (rv, rs) = node_stats(y, &r_rows);
            let l = nodes.len();
            nodes.push(TreeNode::leaf(lv, l_rows.len(), ls, depth + 1));
            nodes.push(TreeNode::leaf(rv, r_rows.len(), rs, depth + 1));
            let node = &mut nodes[id];
            node.feature = Some(f);
            node.threshold = thr;
            node.left = l;
            node.right = l + 1;
            stack.push((l + 1, r_rows));
            stack.push((l, l_rows));
        }
        Self { nodes }
    }

    pub fn leaf_of(&self, row: ArrayView1<f64>) -> usize {
        let mut id = 0;
        while let Some(f) = self.nodes[id].feature {
            id = if row[f] <= self.nodes[id].threshold { self.nodes[id].left } else { self.nodes[id].right };
        }
        id
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        self.nodes[self.leaf_of(row)].value
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            match self.nodes[id].feature {
                None => out.push(id),
                Some(_) => {
                    stack.push(self.nodes[id].right);
                    stack.push(self.nodes[id].left);
                }
            }
        }
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    pub fn root_feature(&self) -> Option<usize> {
        self.nodes[0].feature
    }

    /// Conditions along the path from the root to each leaf, in `leaves()` order.
    pub fn leaf_paths(&self) -> Vec<(usize, Vec<SplitCondition>)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((id, path)) = stack.pop() {
            let node = &self.nodes[id];
            match node.feature {
                None => out.push((id, path)),
                Some(f) => {
                    let mut r = path.clone();
                    r.push(SplitCondition { feature: f, threshold: node.threshold, goes_left: false });
                    let mut l = path;
                    l.push(SplitCondition { feature: f, threshold: node.threshold, goes_left: true });
                    stack.push((node.right, r));
                    stack.push((node.left, l));
                }
            }
        }
        out
    }

    /// Copy of the tree with every node in `collapse` turned into a leaf,
    /// renumbered compactly.
    fn collapsed(&self, is_leaf: impl Fn(usize) -> bool) -> Self {
        let mut nodes = Vec::new();
        let mut stack = vec![(0usize, usize::MAX, false)];
        while let Some((old, parent, right_child)) = stack.pop() {
            let mut node = self.nodes[old].clone();
            let new = nodes.len();
            if parent != usize::MAX {
                let p: &mut TreeNode = &mut nodes[parent];
                if right_child {
                    p.right = new;
                } else {
                    p.left = new;
                }
            }
            let children = (!node.is_leaf() && !is_leaf(old)).then_some((node.left, node.right));
            if children.is_none() {
                node.feature = None;
            }
            nodes.push(node);
            if let Some((l, r)) = children {
                stack.push((r, new, true));
                stack.push((l, new, false));
            }
        }
        Self { nodes }
    }

    pub fn total_leaf_sse(&self) -> f64 {
        self.leaves().iter().map(|&l| self.nodes[l].sse).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCondition {
    pub feature: usize,
    pub threshold: f64,
    /// True for `x[feature] <= threshold`.
    pub goes_left: bool,
}

/// For every node, the complexity parameter at which weakest-link pruning
/// turns it into a leaf (0 for original leaves).
pub fn collapse_alphas(tree: &RegressionTree) -> Vec<f64> {
    let n = tree.nodes.len();
    let mut alpha = vec![0.0; n];
    let mut pruned = vec![false; n];
    let mut current = 0.0f64;
    loop {
        // subtree SSE and leaf counts in the current pruned tree
        let mut sub_sse = vec![0.0; n];
        let mut sub_leaves = vec![0usize; n];
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            order.push(id);
            if !tree.nodes[id].is_leaf() && !pruned[id] {
                stack.push(tree.nodes[id].left);
                stack.push(tree.nodes[id].right);
            }
        }
        for &id in order.iter().rev() {
            let node = &tree.nodes[id];
            if node.is_leaf() || pruned[id] {
                sub_sse[id] = node.sse;
                sub_leaves[id] = 1;
            } else {
                sub_sse[id] = sub_sse[node.left] + sub_sse[node.right];
                sub_leaves[id] = sub_leaves[node.left] + sub_leaves[node.right];
            }
        }
        if sub_leaves[0] == 1 {
            break;
        }
        let g = |id: usize| (tree.nodes[id].sse - sub_sse[id]) / (sub_leaves[id] - 1) as f64;
        let internal: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&id| !tree.nodes[id].is_leaf() && !pruned[id])
            .collect();
        let weakest = internal.iter().map(|&id| g(id)).fold(f64::INFINITY, f64::min);
        current = current.max(weakest);
        let tol = 1e-12 * (1.0 + weakest.abs());
        for &id in &internal {
            if g(id) <= weakest + tol {
                pruned[id] = true;
                alpha[id] = current;
            }
        }
    }
    // nodes swallowed by an ancestor's collapse inherit its complexity
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        let node = &tree.nodes[id];
        if node.is_leaf() {
            continue;
        }
        for child in [node.left, node.right] {
            if !tree.nodes[child].is_leaf() && !pruned[child] {
                alpha[child] = alpha[id];
                pruned[child] = true;
            }
            stack.push(child);
        }
    }
    alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneRule {
    /// Complexity with the smallest cross-validated error.
    MinCv,
    /// Simplest tree whose CV error is within one standard error of the minimum.
    OneSe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvPoint {
    pub alpha: f64,
    pub n_leaves: usize,
    pub cv_mse: f64,
    pub cv_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrunedTree {
    pub tree: RegressionTree,
    pub alpha: f64,
    pub path: Vec<CvPoint>,
}

/// Grow a full tree, then choose the cost-complexity parameter by k-fold
/// cross-validation on squared error.
pub fn fit_pruned(
    x: ArrayView2<f64>,
    y: &[f64],
    params: &TreeParams,
    folds: usize,
    rule: PruneRule,
    seed: u64,
) -> PrunedTree {
    let n = y.len();
    let rows: Vec<usize> = (0..n).collect();
    let mut grow_rng = rng::stream(seed, &[0]);
    let full = RegressionTree::fit(x, y, &rows, params, &mut grow_rng);
    let alphas_full = collapse_alphas(&full);

    let mut seq: Vec<f64> = full
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, nd)| !nd.is_leaf())
        .map(|(i, _)| alphas_full[i])
        .collect();
    seq.push(0.0);
    seq.sort_by(f64::total_cmp);
    seq.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    // representative complexity for each interval [seq[k], seq[k+1])
    let reps: Vec<f64> = (0..seq.len())
        .map(|k| match seq.get(k + 1) {
            Some(&next) if seq[k] > 0.0 => (seq[k] * next).sqrt(),
            Some(&next) => 0.5 * next,
            None => seq[k] * 2.0 + 1.0,
        })
        .collect();

    let folds = folds.clamp(2, n.max(2));
    let mut perm = rows.clone();
    perm.shuffle(&mut rng::stream(seed, &[1]));
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut sq_err = vec![vec![0.0; n]; reps.len()];
    for f in 0..folds {
        let train: Vec<usize> = rows.iter().copied().filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = rows.iter().copied().filter(|&i| fold_of[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let mut r = rng::stream(seed, &[2, f as u64]);
        let t = RegressionTree::fit(x, y, &train, params, &mut r);
        let a = collapse_alphas(&t);
        for (k, &alpha) in reps.iter().enumerate() {
            let sub = t.collapsed(|id| a[id] <= alpha);
            for &i in &test {
                sq_err[k][i] = (y[i] - sub.predict_row(x.row(i))).powi(2);
            }
        }
    }
    let path: Vec<CvPoint> = reps
        .iter()
        .zip(&seq)
        .enumerate()
        .map(|(k, (&rep, &alpha_k))| {
            let errs = &sq_err[k];
            let mse = errs.iter().sum::<f64>() / n as f64;
            let var = errs.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
            let sub = full.collapsed(|id| alphas_full[id] <= rep);
            CvPoint { alpha: alpha_k, n_leaves: sub.n_leaves(), cv_mse: mse, cv_se: (var / n as f64).sqrt() }
        })
        .collect();

    let (best_k, best) = path
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, p)| if p.cv_mse < acc.1 - 1e-15 { (k, p.cv_mse) } else { acc });
    let chosen = match rule {
        PruneRule::MinCv => best_k,
        PruneRule::OneSe => {
            let bound = best + path[best_k].cv_se;
            (best_k..path.len()).rev().find(|&k| path[k].cv_mse <= bound).unwrap_or(best_k)
        }
    };
    let tree = full.collapsed(|id| alphas_full[id] <= reps[chosen]);
    PrunedTree { tree, alpha: seq[chosen], path }
}

/// Uniform draw helper for bootstrap sampling.
pub(crate) fn bootstrap_rows(n: usize, draws: usize, rng: &mut StreamRng) -> Vec<usize> {
    (0..draws).map(|_| rng.random_range(0..n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_leaf_when_min_leaf_blocks_splits() {
        let x = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let rows: Vec<usize> = (0..10).collect();
        let params = TreeParams { min_leaf: 6, ..Default::default() };
        let t = RegressionTree::fit(x.view(), &y, &rows, &params, &mut rng::stream(0, &[]));
        assert_eq!(t.n_leaves(), 1);
        assert!((t.predict_row(x.row(3)) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn weakest_link_alphas_are_monotone_on_paths() {
        let mut r = rng::stream(1, &[]);
        let x = Array2::from_shape_fn((200, 2), |_| r.random::<f64>());
        let y: Vec<f64> = (0..200).map(|i| if x[[i, 0]] > 0.5 { 1.0 } else { 0.0 } + 0.3 * r.random::<f64>()).collect();
        let rows: Vec<usize> = (0..200).collect();
        let t = RegressionTree::fit(x.view(), &y, &rows, &TreeParams { min_leaf: 5, ..Default::default() }, &mut r);
        let a = collapse_alphas(&t);
        for (id, node) in t.nodes.iter().enumerate() {
            if !node.is_leaf() {
                for child in [node.left, node.right] {
                    if !t.nodes[child].is_leaf() {
                        assert!(a[child] <= a[id] + 1e-12, "{id} {child} {} {} {:?}", a[id], a[child], a);
                    }
                }
            }
        }
    }

    #[test]
    fn pruning_keeps_signal_split_and_drops_noise() {
        let n = 2000;
        let mut r = rng::stream(5, &[]);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((n, 2), |_| if r.random::<bool>() { 1.0 } else { 0.0 });
        let y: Vec<f64> = (0..n).map(|i| if x[[i, 0]] == 1.0 { 1.0 } else { -1.0 } + noise.sample(&mut r)).collect();
        let params = TreeParams { min_leaf: 20, ..Default::default() };
        for rule in [PruneRule::MinCv, PruneRule::OneSe] {
            let p = fit_pruned(x.view(), &y, &params, 5, rule, 3);
            assert_eq!(p.tree.root_feature(), Some(0));
            assert_eq!(p.tree.n_leaves(), 2, "{rule:?}");
        }
    }

    #[test]
    fn retained_splits_beat_the_chosen_penalty() {
        let n = 600;
        let mut r = rng::stream(9, &[]);
        let x = Array2::from_shape_fn((n, 3), |_| r.random::<f64>());
        let y: Vec<f64> = (0..n).map(|i| 2.0 * x[[i, 1]] + r.random::<f64>()).collect();
        let p = fit_pruned(x.view(), &y, &TreeParams { min_leaf: 10, ..Default::default() }, 5, PruneRule::MinCv, 1);
        let a = collapse_alphas(&p.tree);
        for (id, node) in p.tree.nodes.iter().enumerate() {
            if !node.is_leaf() {
                assert!(a[id] > p.alpha, "node {id} survives with g={} <= alpha={}", a[id], p.alpha);
            }
        }
    }

    #[test]
    fn constant_response_gives_root_only() {
        let x = Array2::from_shape_fn((100, 2), |(i, j)| (i * (j + 1) % 7) as f64);
        let y = vec![0.25; 100];
        let p = fit_pruned(x.view(), &y, &TreeParams { min_leaf: 5, ..Default::default() }, 5, PruneRule::OneSe, 0);
        assert_eq!(p.tree.n_leaves(), 1);
    }
}
