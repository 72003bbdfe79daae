//! Local test of limited monotonicity: per treatment margin, doubly robust
//! scores for the effect of z̃ on I(D < j), a pruned regression tree on
//! those scores, and split-sample leaf t-tests with Bonferroni thresholds.

use std::fmt::Write as _;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CollapsedSample, TreatmentEncoding};
use crate::error::{Error, Result};
use crate::learners::causal_forest::{fit_causal_forest, CausalForestSpec};
use crate::learners::forest::{fit_forest, ForestSpec};
use crate::learners::tree::{fit_pruned, PruneRule, RegressionTree, TreeParams};
use crate::learners::{trim_propensity, FittedModel, DEFAULT_TRIM};
use crate::rng;
use crate::stats::{normal_quantile, t_statistic};

/// Screening level for leaves on the training half, fixed regardless of alpha.
pub const SCREEN_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimTestConfig {
    pub alpha: f64,
    /// Minimum rows per leaf of the score tree; `None` picks max(20, ⌈n/30⌉).
    pub min_leaf: Option<usize>,
    pub eps: f64,
    /// Regression forest for the propensity and the pseudo-outcome mean.
    pub forest: ForestSpec,
    pub causal_forest: CausalForestSpec,
    pub prune: PruneRule,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for LimTestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_leaf: None,
            eps: DEFAULT_TRIM,
            forest: ForestSpec { n_trees: 200, min_leaf: 10, ..Default::default() },
            causal_forest: CausalForestSpec { n_trees: 200, min_leaf: 10, ..Default::default() },
            prune: PruneRule::OneSe,
            cv_folds: 5,
            seed: 0,
        }
    }
}

pub fn default_min_leaf(n: usize) -> usize {
    20.max(n.div_ceil(30))
}

impl LimTestConfig {
    pub fn resolved_min_leaf(&self, n: usize) -> usize {
        self.min_leaf.unwrap_or_else(|| default_min_leaf(n))
    }
}

/// Q = I(d < j) on integer treatment codes.
pub fn pseudo_outcomes(d: &[f64], j: usize) -> Vec<f64> {
    d.iter().map(|&v| if v < j as f64 { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaScores {
    pub margin: usize,
    pub gamma: Vec<f64>,
    pub tau_oob: Vec<f64>,
    pub mu_oob: Vec<f64>,
    pub e_oob: Vec<f64>,
    /// Rows with no out-of-bag tree in at least one nuisance forest.
    pub oob_fallbacks: usize,
}

/// Γ = τ + (z − e)/(e(1 − e)) · (Q − μ − (z − e)τ).
pub fn assemble_gamma(q: &[f64], z: &[f64], tau: &[f64], mu: &[f64], e: &[f64]) -> Vec<f64> {
    (0..q.len())
        .map(|i| {
            let r = z[i] - e[i];
            tau[i] + r / (e[i] * (1.0 - e[i])) * (q[i] - mu[i] - r * tau[i])
        })
        .collect()
}

fn oob_or_fit(model: &FittedModel, s: &CollapsedSample, fallbacks: &mut usize) -> Vec<f64> {
    let oob = model.oob_predictions.as_ref();
    (0..s.n())
        .map(|i| match oob.and_then(|v| v[i]) {
            Some(p) => p,
            None => {
                *fallbacks += 1;
                model.predict_row(s.x.row(i))
            }
        })
        .collect()
}

pub fn gamma_scores(s: &CollapsedSample, j: usize, config: &LimTestConfig, seed: u64) -> Result<GammaScores> {
    let d = s.d.to_vec();
    let q = pseudo_outcomes(&d, j);
    let z = s.z_tilde.to_vec();
    let qa = Array1::from(q.clone());
    let cf = fit_causal_forest(s.x.view(), s.z_tilde.view(), qa.view(), &config.causal_forest, rng::derive_seed(seed, &[0]))?;
    let e_model = fit_forest(s.x.view(), s.z_tilde.view(), &config.forest, rng::derive_seed(seed, &[1]))?;
    let mu_model = fit_forest(s.x.view(), qa.view(), &config.forest, rng::derive_seed(seed, &[2]))?;
    let mut fallbacks = cf.oob_missing;
    let e = trim_propensity(&oob_or_fit(&e_model, s, &mut fallbacks), config.eps);
    let mu = oob_or_fit(&mu_model, s, &mut fallbacks);
    let gamma = assemble_gamma(&q, &z, &cf.tau_oob, &mu, &e);
    Ok(GammaScores { margin: j, gamma, tau_oob: cf.tau_oob, mu_oob: mu, e_oob: e, oob_fallbacks: fallbacks })
}

/// Pruned regression tree of the scores on the covariates.
pub fn fit_gamma_tree(gamma: &[f64], s: &CollapsedSample, min_leaf: usize, folds: usize, rule: PruneRule, seed: u64) -> RegressionTree {
    let params = TreeParams { min_leaf, max_depth: None, mtry: None };
    fit_pruned(s.x.view(), gamma, &params, folds, rule, seed).tree
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeafTest {
    pub leaf_id: usize,
    pub n_leaf: usize,
    pub mean_gamma: f64,
    pub t_train: Option<f64>,
    pub t_holdout: Option<f64>,
    pub n_holdout: usize,
    pub passed_screen: bool,
    /// Membership predicate, e.g. `south > 0.5 & age <= 0.5`.
    pub rule: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub node: usize,
    pub depth: usize,
    pub variable: String,
    pub cut: f64,
    pub n: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSummary {
    /// Half used to grow the tree and screen leaves ("A" or "B").
    pub train_half: String,
    pub n_train: usize,
    pub n_leaves: usize,
    pub splits: Vec<SplitSummary>,
    pub leaves: Vec<LeafTest>,
    /// Leaves with a defined screening statistic.
    pub l_max: usize,
    pub screen_threshold: Option<f64>,
    pub zero_variance_leaves: usize,
    pub skipped_holdout: usize,
    pub first_split_variable: Option<String>,
    pub rendering: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginResult {
    pub margin: usize,
    /// Treatment levels on either side of the margin.
    pub level_below: Option<f64>,
    pub level_above: Option<f64>,
    pub reject: bool,
    pub max_t: Option<f64>,
    pub threshold: Option<f64>,
    pub t_vec: Vec<f64>,
    pub trees: Vec<TreeSummary>,
    /// Root split of the tree whose leaf produced the largest statistic.
    pub first_split_variable: Option<String>,
    pub oob_fallbacks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimTestReport {
    pub margins: Vec<MarginResult>,
    pub overall_reject: bool,
    pub alpha: f64,
    pub min_leaf: usize,
    pub seed: u64,
    pub n: usize,
    pub levels: Vec<f64>,
    pub config: LimTestConfig,
}

fn describe(tree: &RegressionTree, names: &[String]) -> (Vec<SplitSummary>, String) {
    let mut splits = Vec::new();
    let mut text = String::new();
    let mut stack = vec![(0usize, String::from("root"))];
    while let Some((id, label)) = stack.pop() {
        let node = &tree.nodes[id];
        let indent = "  ".repeat(node.depth);
        let _ = writeln!(text, "{indent}{label}: n={} mean={:.6}", node.n, node.value);
        if let Some(f) = node.feature {
            let name = names.get(f).cloned().unwrap_or_else(|| format!("x{f}"));
            splits.push(SplitSummary {
                node: id,
                depth: node.depth,
                variable: name.clone(),
                cut: node.threshold,
                n: node.n,
                mean: node.value,
            });
            stack.push((node.right, format!("{name} > {:.6}", node.threshold)));
            stack.push((node.left, format!("{name} <= {:.6}", node.threshold)));
        }
    }
    (splits, text)
}

/// Grow on `train`, screen leaves there, confirm on `hold`.
#[allow(clippy::too_many_arguments)]
fn half_test(
    train: &CollapsedSample,
    g_train: &[f64],
    hold: &CollapsedSample,
    g_hold: &[f64],
    label: &str,
    min_leaf: usize,
    config: &LimTestConfig,
    seed: u64,
) -> (TreeSummary, Vec<f64>) {
    let tree = fit_gamma_tree(g_train, train, min_leaf, config.cv_folds, config.prune, seed);
    let names = &train.covariate_names;
    let leaf_train: Vec<usize> = (0..train.n()).map(|i| tree.leaf_of(train.x.row(i))).collect();
    let leaf_hold: Vec<usize> = (0..hold.n()).map(|i| tree.leaf_of(hold.x.row(i))).collect();
    let mut leaves = Vec::new();
    let mut zero_var = 0;
    for (leaf, path) in tree.leaf_paths() {
        let vals: Vec<f64> = (0..train.n()).filter(|&i| leaf_train[i] == leaf).map(|i| g_train[i]).collect();
        let t = t_statistic(&vals);
        if t.is_none() {
            zero_var += 1;
        }
        let rule = path
            .iter()
            .map(|c| {
                let name = names.get(c.feature).cloned().unwrap_or_else(|| format!("x{}", c.feature));
                format!("{name} {} {:.6}", if c.goes_left { "<=" } else { ">" }, c.threshold)
            })
            .collect::<Vec<_>>()
            .join(" & ");
        leaves.push(LeafTest {
            leaf_id: leaf,
            n_leaf: vals.len(),
            mean_gamma: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
            t_train: t,
            t_holdout: None,
            n_holdout: 0,
            passed_screen: false,
            rule: if rule.is_empty() { "all".into() } else { rule },
        });
    }
    let l_max = leaves.iter().filter(|l| l.t_train.is_some()).count();
    let screen = (l_max > 0).then(|| normal_quantile(1.0 - SCREEN_LEVEL / l_max as f64));
    let mut t_vec = Vec::new();
    let mut skipped = 0;
    for leaf in &mut leaves {
        let (Some(t), Some(thr)) = (leaf.t_train, screen) else { continue };
        if t <= thr {
            continue;
        }
        leaf.passed_screen = true;
        let vals: Vec<f64> = (0..hold.n()).filter(|&i| leaf_hold[i] == leaf.leaf_id).map(|i| g_hold[i]).collect();
        leaf.n_holdout = vals.len();
        match t_statistic(&vals) {
            Some(th) => {
                leaf.t_holdout = Some(th);
                t_vec.push(th);
            }
            None => skipped += 1,
        }
    }
    let (splits, rendering) = describe(&tree, names);
    let first = tree.root_feature().map(|f| names.get(f).cloned().unwrap_or_else(|| format!("x{f}")));
    let summary = TreeSummary {
        train_half: label.into(),
        n_train: train.n(),
        n_leaves: tree.n_leaves(),
        splits,
        leaves,
        l_max,
        screen_threshold: screen,
        zero_variance_leaves: zero_var,
        skipped_holdout: skipped,
        first_split_variable: first,
        rendering,
    };
    (summary, t_vec)
}

/// Halve the sample, stratified on (z̃, Q) cells so both halves keep both arms.
pub fn stratified_halves(z: &[f64], q: &[f64], rng: &mut rng::StreamRng) -> (Vec<usize>, Vec<usize>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut next = 0usize;
    for zv in [1.0, 0.0] {
        for qv in [1.0, 0.0] {
            let mut rows: Vec<usize> = (0..z.len()).filter(|&i| z[i] == zv && q[i] == qv).collect();
            rows.shuffle(rng);
            for i in rows {
                if next.is_multiple_of(2) { a.push(i) } else { b.push(i) }
                next += 1;
            }
        }
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Split-sample test of one margin on an integer-coded sample.
pub fn split_sample_test(s: &CollapsedSample, j: usize, config: &LimTestConfig, seed: u64) -> Result<MarginResult> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    let q = pseudo_outcomes(&s.d.to_vec(), j);
    let (ia, ib) = stratified_halves(&s.z_tilde.to_vec(), &q, &mut rng::stream(seed, &[0xa5]));
    let (a, b) = (s.subset(&ia), s.subset(&ib));
    for h in [&a, &b] {
        if h.n1 == 0 || h.n0 == 0 {
            return Err(Error::OuterSupportEmpty { n1: h.n1, n0: h.n0 });
        }
    }
    let min_leaf = config.resolved_min_leaf(s.n());
    let ga = gamma_scores(&a, j, config, rng::derive_seed(seed, &[1]))?;
    let gb = gamma_scores(&b, j, config, rng::derive_seed(seed, &[2]))?;
    let (ta, va) = half_test(&a, &ga.gamma, &b, &gb.gamma, "A", min_leaf, config, rng::derive_seed(seed, &[3]));
    let (tb, vb) = half_test(&b, &gb.gamma, &a, &ga.gamma, "B", min_leaf, config, rng::derive_seed(seed, &[4]));
    let mut t_vec = va.clone();
    t_vec.extend_from_slice(&vb);
    let max_t = t_vec.iter().copied().fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))));
    let threshold = (!t_vec.is_empty()).then(|| normal_quantile(1.0 - config.alpha / t_vec.len() as f64));
    let reject = matches!((max_t, threshold), (Some(m), Some(c)) if m > c);
    let first_split_variable = max_t.and_then(|m| {
        let from_a = va.contains(&m);
        if from_a { ta.first_split_variable.clone() } else { tb.first_split_variable.clone() }
    });
    Ok(MarginResult {
        margin: j,
        level_below: None,
        level_above: None,
        reject,
        max_t,
        threshold,
        t_vec,
        trees: vec![ta, tb],
        first_split_variable,
        oob_fallbacks: ga.oob_fallbacks + gb.oob_fallbacks,
    })
}

/// All margins j = 1..J of an (integer-coded or level-valued) treatment.
pub fn lim_test(s: &CollapsedSample, config: &LimTestConfig) -> Result<LimTestReport> {
    let (coded, enc): (CollapsedSample, TreatmentEncoding) = s.encode_treatment()?;
    let j_max = enc.max_code();
    if j_max == 0 {
        return Err(Error::ConstantTreatment);
    }
    let mut margins = (1..=j_max)
        .into_par_iter()
        .map(|j| split_sample_test(&coded, j, config, rng::derive_seed(config.seed, &[j as u64])))
        .collect::<Result<Vec<_>>>()?;
    for m in &mut margins {
        m.level_below = enc.decode(m.margin - 1);
        m.level_above = enc.decode(m.margin);
    }
    Ok(LimTestReport {
        overall_reject: margins.iter().any(|m| m.reject),
        margins,
        alpha: config.alpha,
        min_leaf: config.resolved_min_leaf(s.n()),
        seed: config.seed,
        n: s.n(),
        levels: enc.levels.clone(),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn sample(d: Vec<f64>, z: Vec<f64>, x: Array2<f64>, names: Vec<&str>) -> CollapsedSample {
        let n = d.len();
        CollapsedSample::from_parts(
            Array1::zeros(n),
            Array1::from(d),
            Array1::from(z),
            x,
            names.into_iter().map(String::from).collect(),
        )
        .unwrap()
    }

    #[test]
    fn indicator_pseudo_outcomes() {
        assert_eq!(pseudo_outcomes(&[0.0, 1.0, 2.0], 1), vec![1.0, 0.0, 0.0]);
        assert_eq!(pseudo_outcomes(&[0.0, 1.0, 2.0, 2.0], 2), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn thresholds() {
        assert!((normal_quantile(1.0 - 0.05 / 2.0) - 1.959964).abs() < 1e-6);
        assert!((normal_quantile(1.0 - SCREEN_LEVEL) - 1.644854).abs() < 1e-6);
        assert_eq!(default_min_leaf(1500), 50);
        assert_eq!(default_min_leaf(100), 20);
    }

    #[test]
    fn constant_nuisances_reduce_to_difference_in_means() {
        let mut r = rng::stream(1, &[]);
        let n = 400;
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let q: Vec<f64> = (0..n).map(|_| if r.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
        let qbar = q.iter().sum::<f64>() / n as f64;
        let g = assemble_gamma(&q, &z, &vec![0.0; n], &vec![qbar; n], &vec![0.5; n]);
        for i in 0..n {
            assert!((g[i] - 4.0 * (z[i] - 0.5) * (q[i] - qbar)).abs() < 1e-12);
        }
        let mean = |f: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = (0..n).filter(|&i| f(i)).map(|i| q[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let dim = mean(&|i| z[i] == 1.0) - mean(&|i| z[i] == 0.0);
        let gbar = g.iter().sum::<f64>() / n as f64;
        assert!((gbar - dim).abs() < 1e-10);
        // any tau drops out when the propensity is exactly one half
        let tau: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let g2 = assemble_gamma(&q, &z, &tau, &vec![qbar; n], &vec![0.5; n]);
        let g2bar = g2.iter().sum::<f64>() / n as f64;
        assert!((g2bar - dim).abs() < 1e-10);
    }

    #[test]
    fn gamma_tree_finds_planted_region_and_ignores_constant() {
        let n = 2000;
        let mut r = rng::stream(2, &[]);
        let x = Array2::from_shape_fn((n, 3), |_| if r.random::<bool>() { 1.0 } else { 0.0 });
        let s = sample(vec![0.0; n], (0..n).map(|i| (i % 2) as f64).collect(), x.clone(), vec!["a", "b", "c"]);
        let g: Vec<f64> = (0..n).map(|i| if x[[i, 1]] == 1.0 { 1.0 } else { -1.0 } + r.random::<f64>() - 0.5).collect();
        let t = fit_gamma_tree(&g, &s, 50, 5, PruneRule::OneSe, 0);
        assert_eq!(t.root_feature(), Some(1));
        let t = fit_gamma_tree(&vec![0.3; n], &s, 50, 5, PruneRule::OneSe, 0);
        assert_eq!(t.n_leaves(), 1);
    }

    #[test]
    fn halves_are_balanced() {
        let z: Vec<f64> = (0..101).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let q: Vec<f64> = (0..101).map(|i| (i % 5 == 0) as u8 as f64).collect();
        let (a, b) = stratified_halves(&z, &q, &mut rng::stream(0, &[]));
        assert_eq!(a.len() + b.len(), 101);
        assert!(a.len().abs_diff(b.len()) <= 1);
        let za = a.iter().filter(|&&i| z[i] == 1.0).count() as i64;
        let zb = b.iter().filter(|&&i| z[i] == 1.0).count() as i64;
        assert!((za - zb).abs() <= 2);
    }

    fn violated_like(n: usize, seed: u64, flip: bool) -> CollapsedSample {
        // region x0 = 1 has z̃ raise P(D = 0); elsewhere z̃ lowers it
        let mut r = rng::stream(seed, &[]);
        let x = Array2::from_shape_fn((n, 2), |_| if r.random::<f64>() < 0.4 { 1.0 } else { 0.0 });
        let z: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let d: Vec<f64> = (0..n)
            .map(|i| {
                let base = 0.5;
                let shift = if x[[i, 0]] == 1.0 { 0.3 } else { -0.2 };
                let shift = if flip { -shift } else { shift };
                let p0 = base + shift * z[i];
                if r.random::<f64>() < p0 { 0.0 } else { 1.0 }
            })
            .collect();
        sample(d, z, x, vec!["south", "other"])
    }

    fn fast_config() -> LimTestConfig {
        LimTestConfig {
            forest: ForestSpec { n_trees: 50, min_leaf: 10, ..Default::default() },
            causal_forest: CausalForestSpec { n_trees: 50, min_leaf: 10, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn planted_violation_is_detected_and_direction_matters() {
        let s = violated_like(2000, 3, false);
        let rep = lim_test(&s, &fast_config()).unwrap();
        assert_eq!(rep.margins.len(), 1);
        assert!(rep.overall_reject, "{:?}", rep.margins[0].t_vec);
        assert_eq!(rep.margins[0].first_split_variable.as_deref(), Some("south"));
        // flipping the construction turns the south region into a complier region
        let s = violated_like(2000, 3, true);
        let m = &lim_test(&s, &fast_config()).unwrap().margins[0];
        let south_leaf = m.trees[0].leaves.iter().find(|l| l.rule.starts_with("south >"));
        if let Some(l) = south_leaf {
            assert!(l.mean_gamma < 0.0);
        }
    }

    #[test]
    fn report_is_deterministic() {
        let s = violated_like(600, 4, false);
        let a = serde_json::to_string(&lim_test(&s, &fast_config()).unwrap()).unwrap();
        let b = serde_json::to_string(&lim_test(&s, &fast_config()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_treatment_is_an_error() {
        let x = Array2::zeros((40, 1));
        let s = sample(vec![1.0; 40], (0..40).map(|i| (i % 2) as f64).collect(), x, vec!["a"]);
        assert!(matches!(lim_test(&s, &fast_config()), Err(Error::ConstantTreatment)));
    }
}
