//! Cross-fitted estimation of the combined-compliers response with
//! covariates, using the interactive-IV orthogonal score.

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::CollapsedSample;
use crate::error::{Error, Result};
use crate::learners::{trim_propensity, LearnerSpec, DEFAULT_TRIM};
use crate::rng;
use crate::stats::{median, ordered_sum, two_sided_critical};

/// Learners for the outcome, treatment and instrument-propensity regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpecs {
    pub outcome: LearnerSpec,
    pub treatment: LearnerSpec,
    pub propensity: LearnerSpec,
}

impl NuisanceSpecs {
    pub fn all(spec: LearnerSpec) -> Self {
        Self { outcome: spec.clone(), treatment: spec.clone(), propensity: spec }
    }
}

/// Out-of-fold nuisance predictions, one entry per row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceFits {
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
    pub m1: Vec<f64>,
    pub m0: Vec<f64>,
    /// Instrument propensity after trimming.
    pub p: Vec<f64>,
    pub fold_assignment: Vec<usize>,
    pub trimmed: usize,
    /// Cross-validated RMSE reported by each fitted model, averaged over
    /// folds, keyed as mu1, mu0, m1, m0, p. `None` for learners that do not
    /// report one.
    pub cv_rmse: Vec<(String, Option<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    /// Mean of the outcome-side term.
    pub numerator: f64,
    /// Mean of the treatment-side term (the negated Jacobian).
    pub denominator: f64,
}

/// Assign rows to `k` folds, stratified on z̃ so every fold sees both arms.
/// Fold sizes differ by at most one.
pub fn stratified_folds(z_tilde: &[f64], k: usize, rng: &mut rng::StreamRng) -> Vec<usize> {
    let mut fold = vec![0usize; z_tilde.len()];
    let mut next = 0usize;
    for arm in [1.0, 0.0] {
        let mut rows: Vec<usize> = (0..z_tilde.len()).filter(|&i| z_tilde[i] == arm).collect();
        rows.shuffle(rng);
        for i in rows {
            fold[i] = next % k;
            next += 1;
        }
    }
    fold
}

fn check_folds(s: &CollapsedSample, fold: &[usize], k: usize) -> Option<(usize, u8)> {
    for f in 0..k {
        for arm in [1u8, 0] {
            let held_out = (0..s.n()).any(|i| fold[i] == f && s.z_tilde[i] == arm as f64);
            let trained = (0..s.n()).any(|i| fold[i] != f && s.z_tilde[i] == arm as f64);
            if !held_out || !trained {
                return Some((f, arm));
            }
        }
    }
    None
}

/// Cross-fit from an explicit fold assignment. `folds == 1` trains every
/// nuisance on the full sample.
pub fn crossfit_with_folds(
    s: &CollapsedSample,
    specs: &NuisanceSpecs,
    fold: &[usize],
    eps: f64,
    seed: u64,
) -> Result<NuisanceFits> {
    let n = s.n();
    if fold.len() != n {
        return Err(Error::ShapeMismatch(format!("fold assignment has {} rows, sample {n}", fold.len())));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::invalid(format!("trimming eps must lie in (0, 0.5), got {eps}")));
    }
    let k = fold.iter().max().map_or(1, |m| m + 1);
    let mut out = NuisanceFits {
        mu1: vec![0.0; n],
        mu0: vec![0.0; n],
        m1: vec![0.0; n],
        m0: vec![0.0; n],
        p: vec![0.0; n],
        fold_assignment: fold.to_vec(),
        trimmed: 0,
        cv_rmse: vec![],
    };
    let names = ["mu1", "mu0", "m1", "m0", "p"];
    let mut rmse_sums = [(0.0, 0usize); 5];
    for f in 0..k {
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let train: Vec<usize> = if k == 1 { (0..n).collect() } else { (0..n).filter(|&i| fold[i] != f).collect() };
        let xt = s.x.select(Axis(0), &test);
        let mut fit_into = |slot: usize, rows: &[usize], target: &ndarray::Array1<f64>, spec: &LearnerSpec| -> Result<Vec<f64>> {
            let model = spec.fit(
                s.x.select(Axis(0), rows).view(),
                target.select(Axis(0), rows).view(),
                rng::derive_seed(seed, &[f as u64, slot as u64]),
            )?;
            if let Some(r) = model.training_rmse_cv {
                rmse_sums[slot].0 += r;
                rmse_sums[slot].1 += 1;
            }
            Ok(model.predict(xt.view()).to_vec())
        };
        let treated: Vec<usize> = train.iter().copied().filter(|&i| s.z_tilde[i] == 1.0).collect();
        let control: Vec<usize> = train.iter().copied().filter(|&i| s.z_tilde[i] == 0.0).collect();
        if treated.is_empty() || control.is_empty() {
            return Err(Error::DegenerateFold { fold: f, arm: if treated.is_empty() { 1 } else { 0 } });
        }
        let preds = [
            fit_into(0, &treated, &s.y, &specs.outcome)?,
            fit_into(1, &control, &s.y, &specs.outcome)?,
            fit_into(2, &treated, &s.d, &specs.treatment)?,
            fit_into(3, &control, &s.d, &specs.treatment)?,
            fit_into(4, &train, &s.z_tilde, &specs.propensity)?,
        ];
        for (pos, &i) in test.iter().enumerate() {
            out.mu1[i] = preds[0][pos];
            out.mu0[i] = preds[1][pos];
            out.m1[i] = preds[2][pos];
            out.m0[i] = preds[3][pos];
            out.p[i] = preds[4][pos];
        }
    }
    out.trimmed = out.p.iter().filter(|&&v| v < eps || v > 1.0 - eps).count();
    out.p = trim_propensity(&out.p, eps);
    out.cv_rmse = names
        .iter()
        .zip(rmse_sums)
        .map(|(name, (sum, c))| (name.to_string(), (c > 0).then(|| sum / c as f64)))
        .collect();
    Ok(out)
}

/// Draw stratified folds (one retry with a fresh permutation) and cross-fit.
pub fn crossfit_nuisances(
    s: &CollapsedSample,
    specs: &NuisanceSpecs,
    folds: usize,
    eps: f64,
    seed: u64,
) -> Result<NuisanceFits> {
    if folds == 0 {
        return Err(Error::invalid("folds must be >= 1"));
    }
    let z = s.z_tilde.to_vec();
    let mut fold = stratified_folds(&z, folds, &mut rng::stream(seed, &[0xf01d, 0]));
    if folds > 1 {
        if check_folds(s, &fold, folds).is_some() {
            fold = stratified_folds(&z, folds, &mut rng::stream(seed, &[0xf01d, 1]));
        }
        if let Some((fold, arm)) = check_folds(s, &fold, folds) {
            return Err(Error::DegenerateFold { fold, arm });
        }
    }
    crossfit_with_folds(s, specs, &fold, eps, seed)
}

fn weight(z: f64, p: f64) -> f64 {
    z / p - (1.0 - z) / (1.0 - p)
}

fn y_term(i: usize, s: &CollapsedSample, f: &NuisanceFits) -> f64 {
    let z = s.z_tilde[i];
    let mu_z = if z == 1.0 { f.mu1[i] } else { f.mu0[i] };
    f.mu1[i] - f.mu0[i] + weight(z, f.p[i]) * (s.y[i] - mu_z)
}

fn d_term(i: usize, s: &CollapsedSample, f: &NuisanceFits) -> f64 {
    let z = s.z_tilde[i];
    let m_z = if z == 1.0 { f.m1[i] } else { f.m0[i] };
    f.m1[i] - f.m0[i] + weight(z, f.p[i]) * (s.d[i] - m_z)
}

/// Orthogonal score of row `i` at `beta`.
pub fn orthogonal_score(i: usize, s: &CollapsedSample, beta: f64, fits: &NuisanceFits) -> f64 {
    y_term(i, s, fits) - d_term(i, s, fits) * beta
}

/// Root of the empirical moment, which is linear in beta.
pub fn solve_beta(fits: &NuisanceFits, s: &CollapsedSample) -> Result<(f64, ScoreComponents)> {
    let n = s.n() as f64;
    let ys: Vec<f64> = (0..s.n()).map(|i| y_term(i, s, fits)).collect();
    let ds: Vec<f64> = (0..s.n()).map(|i| d_term(i, s, fits)).collect();
    let numerator = ordered_sum(&ys) / n;
    let denominator = ordered_sum(&ds) / n;
    let scale = ds.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if denominator.abs() <= 1e-12 * scale {
        return Err(Error::IrrelevantAfterAdjustment);
    }
    Ok((numerator / denominator, ScoreComponents { numerator, denominator }))
}

/// Plug-in standard error from the influence function -J⁻¹ψ.
pub fn dml_variance(fits: &NuisanceFits, beta: f64, components: &ScoreComponents, s: &CollapsedSample) -> f64 {
    let n = s.n() as f64;
    let phi_sq: Vec<f64> = (0..s.n())
        .map(|i| (orthogonal_score(i, s, beta, fits) / components.denominator).powi(2))
        .collect();
    (ordered_sum(&phi_sq) / n / n).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitResult {
    pub beta: f64,
    pub se: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// Mean orthogonal score at the returned beta.
    pub moment: f64,
    pub trimmed: usize,
    pub cv_rmse: Vec<(String, Option<f64>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmlConfig {
    pub specs: NuisanceSpecs,
    pub folds: usize,
    pub splits: usize,
    pub eps: f64,
    pub ci_level: f64,
    pub seed: u64,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self {
            specs: NuisanceSpecs::all(LearnerSpec::Lasso(Default::default())),
            folds: 5,
            splits: 5,
            eps: DEFAULT_TRIM,
            ci_level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub beta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub per_split_betas: Vec<f64>,
    pub splits: Vec<SplitResult>,
    pub aggregation: String,
    pub folds: usize,
    pub n: usize,
}

/// Single sample split: cross-fit, solve, and compute the standard error.
pub fn dml_split(s: &CollapsedSample, config: &DmlConfig, split: usize) -> Result<SplitResult> {
    let seed = rng::derive_seed(config.seed, &[split as u64]);
    let fits = crossfit_nuisances(s, &config.specs, config.folds, config.eps, seed)?;
    split_from_fits(s, &fits)
}

pub fn split_from_fits(s: &CollapsedSample, fits: &NuisanceFits) -> Result<SplitResult> {
    let (beta, comp) = solve_beta(fits, s)?;
    let se = dml_variance(fits, beta, &comp, s);
    let scores: Vec<f64> = (0..s.n()).map(|i| orthogonal_score(i, s, beta, fits)).collect();
    Ok(SplitResult {
        beta,
        se,
        numerator: comp.numerator,
        denominator: comp.denominator,
        moment: ordered_sum(&scores) / s.n() as f64,
        trimmed: fits.trimmed,
        cv_rmse: fits.cv_rmse.clone(),
    })
}

/// Median aggregation over `splits` independent fold draws.
pub fn dml_estimate(s: &CollapsedSample, config: &DmlConfig) -> Result<DmlEstimate> {
    if config.splits == 0 {
        return Err(Error::invalid("splits must be >= 1"));
    }
    if !(config.ci_level > 0.0 && config.ci_level < 1.0) {
        return Err(Error::invalid(format!("ci level must lie in (0, 1), got {}", config.ci_level)));
    }
    let splits = (0..config.splits).map(|k| dml_split(s, config, k)).collect::<Result<Vec<_>>>()?;
    let betas: Vec<f64> = splits.iter().map(|r| r.beta).collect();
    let (beta, se) = aggregate_splits(&splits);
    let z = two_sided_critical(config.ci_level);
    Ok(DmlEstimate {
        beta,
        se,
        ci_low: beta - z * se,
        ci_high: beta + z * se,
        ci_level: config.ci_level,
        per_split_betas: betas,
        splits,
        aggregation: "median".into(),
        folds: config.folds,
        n: s.n(),
    })
}

/// Median beta and the median-corrected standard error
/// sqrt(median(se_s² + (beta_s − beta)²)).
pub fn aggregate_splits(splits: &[SplitResult]) -> (f64, f64) {
    let betas: Vec<f64> = splits.iter().map(|r| r.beta).collect();
    let beta = median(&betas);
    let spread: Vec<f64> = splits.iter().map(|r| r.se * r.se + (r.beta - beta).powi(2)).collect();
    (beta, median(&spread).sqrt())
}

/// Naive plug-in ratio of fitted differences, for comparisons only.
pub fn plug_in_ratio(fits: &NuisanceFits) -> f64 {
    let num: Vec<f64> = fits.mu1.iter().zip(&fits.mu0).map(|(a, b)| a - b).collect();
    let den: Vec<f64> = fits.m1.iter().zip(&fits.m0).map(|(a, b)| a - b).collect();
    ordered_sum(&num) / ordered_sum(&den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::cc_acr_wald;
    use crate::learners::LassoSpec;
    use crate::sim::linear_iv_sample;

    fn mean_specs() -> NuisanceSpecs {
        NuisanceSpecs::all(LearnerSpec::Mean)
    }

    #[test]
    fn intercept_only_k1_reduces_to_wald() {
        let s = linear_iv_sample(400, 2.0, 0.5, 3);
        let fits = crossfit_nuisances(&s, &mean_specs(), 1, 0.01, 0).unwrap();
        let (beta, _) = solve_beta(&fits, &s).unwrap();
        let w = cc_acr_wald(&s, 0.95).unwrap();
        assert!((beta - w.beta).abs() < 1e-10, "{beta} vs {}", w.beta);
        let moment: f64 = (0..s.n()).map(|i| orthogonal_score(i, &s, beta, &fits)).sum::<f64>() / s.n() as f64;
        assert!(moment.abs() < 1e-10);
    }

    #[test]
    fn intercept_only_k5_is_close_to_wald() {
        let s = linear_iv_sample(2000, 2.0, 0.5, 4);
        let cfg = DmlConfig { specs: mean_specs(), splits: 1, ..Default::default() };
        let e = dml_estimate(&s, &cfg).unwrap();
        let w = cc_acr_wald(&s, 0.95).unwrap();
        assert!((e.beta - w.beta).abs() < 1e-2 * w.se);
    }

    #[test]
    fn score_identities() {
        let s = linear_iv_sample(200, 1.0, 0.5, 5);
        let fits = crossfit_nuisances(&s, &mean_specs(), 2, 0.01, 1).unwrap();
        // beta = 0 leaves the outcome-side term alone
        for i in 0..5 {
            let z = s.z_tilde[i];
            let mu = if z == 1.0 { fits.mu1[i] } else { fits.mu0[i] };
            let w = z / fits.p[i] - (1.0 - z) / (1.0 - fits.p[i]);
            let expect = fits.mu1[i] - fits.mu0[i] + w * (s.y[i] - mu);
            assert!((orthogonal_score(i, &s, 0.0, &fits) - expect).abs() < 1e-14);
        }
        // identity outcome with shared nuisances
        let mut t = s.clone();
        t.y = t.d.clone();
        let mut f = fits.clone();
        f.mu1 = f.m1.clone();
        f.mu0 = f.m0.clone();
        assert!((0..t.n()).all(|i| orthogonal_score(i, &t, 1.0, &f).abs() < 1e-12));
        let r = split_from_fits(&t, &f).unwrap();
        assert!((r.beta - 1.0).abs() < 1e-12);
        assert!(r.se < 1e-12);
    }

    #[test]
    fn outcome_scaling_scales_estimate() {
        let s = linear_iv_sample(300, 1.5, 0.5, 6);
        let cfg = DmlConfig { specs: mean_specs(), splits: 1, folds: 3, ..Default::default() };
        let a = dml_estimate(&s, &cfg).unwrap();
        let mut t = s.clone();
        t.y.mapv_inplace(|v| 3.0 * v);
        let b = dml_estimate(&t, &cfg).unwrap();
        assert!((b.beta - 3.0 * a.beta).abs() < 1e-9 * b.beta.abs().max(1.0));
        assert!((b.se - 3.0 * a.se).abs() < 1e-9 * b.se.max(1.0));
    }

    #[test]
    fn zero_outcome_side_gives_zero() {
        let mut s = linear_iv_sample(100, 1.0, 0.5, 7);
        s.y.fill(0.0);
        let fits = crossfit_nuisances(&s, &mean_specs(), 2, 0.01, 0).unwrap();
        assert_eq!(solve_beta(&fits, &s).unwrap().0, 0.0);
    }

    #[test]
    fn irrelevant_instrument_after_adjustment() {
        let mut s = linear_iv_sample(100, 1.0, 0.5, 8);
        s.d.fill(1.0);
        let fits = crossfit_nuisances(&s, &mean_specs(), 1, 0.01, 0).unwrap();
        assert!(matches!(solve_beta(&fits, &s), Err(Error::IrrelevantAfterAdjustment)));
    }

    #[test]
    fn median_aggregation() {
        let mk = |b| SplitResult { beta: b, se: 1.0, numerator: 0.0, denominator: 1.0, moment: 0.0, trimmed: 0, cv_rmse: vec![] };
        let (beta, se) = aggregate_splits(&[mk(1.0), mk(2.0), mk(10.0)]);
        assert_eq!(beta, 2.0);
        assert!((se - 2f64.sqrt()).abs() < 1e-12);
        let (b1, s1) = aggregate_splits(&[mk(4.0)]);
        assert_eq!((b1, s1), (4.0, 1.0));
    }

    #[test]
    fn folds_are_balanced_and_stratified() {
        let s = linear_iv_sample(103, 1.0, 0.3, 9);
        let f = stratified_folds(&s.z_tilde.to_vec(), 5, &mut rng::stream(0, &[]));
        let sizes: Vec<usize> = (0..5).map(|k| f.iter().filter(|&&v| v == k).count()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(check_folds(&s, &f, 5).is_none());
    }

    #[test]
    fn leave_one_out_fits_exclude_own_row() {
        let s = linear_iv_sample(12, 1.0, 0.5, 10);
        let fold: Vec<usize> = (0..12).collect();
        let fits = crossfit_with_folds(&s, &mean_specs(), &fold, 0.01, 0).unwrap();
        for i in 0..12 {
            let others: Vec<usize> = (0..12).filter(|&j| j != i).collect();
            let share = others.iter().map(|&j| s.z_tilde[j]).sum::<f64>() / 11.0;
            assert!((fits.p[i] - share.clamp(0.01, 0.99)).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_fold_fails() {
        let s = linear_iv_sample(40, 1.0, 0.5, 11);
        let n1 = s.n1;
        let r = crossfit_nuisances(&s, &mean_specs(), n1 + 1, 0.01, 0);
        assert!(matches!(r, Err(Error::DegenerateFold { .. })));
    }

    #[test]
    fn row_order_does_not_change_beta() {
        let s = linear_iv_sample(300, 2.0, 0.5, 12);
        let fold = stratified_folds(&s.z_tilde.to_vec(), 4, &mut rng::stream(1, &[]));
        let a = split_from_fits(&s, &crossfit_with_folds(&s, &mean_specs(), &fold, 0.01, 0).unwrap()).unwrap();
        let mut order: Vec<usize> = (0..s.n()).collect();
        order.shuffle(&mut rng::stream(2, &[]));
        let t = s.subset(&order);
        let fold_t: Vec<usize> = order.iter().map(|&i| fold[i]).collect();
        let b = split_from_fits(&t, &crossfit_with_folds(&t, &mean_specs(), &fold_t, 0.01, 0).unwrap()).unwrap();
        assert_eq!(a.beta.to_bits(), b.beta.to_bits());
    }

    #[test]
    fn randomized_linear_dgp_is_recovered() {
        let s = linear_iv_sample(5000, 2.0, 0.5, 13);
        let cfg = DmlConfig { specs: NuisanceSpecs::all(LearnerSpec::Lasso(LassoSpec::default())), splits: 1, ..Default::default() };
        let e = dml_estimate(&s, &cfg).unwrap();
        assert!((e.beta - 2.0).abs() < 3.0 * e.se, "{} se {}", e.beta, e.se);
        assert!(e.splits[0].moment.abs() < 1e-10);
    }

    #[test]
    fn neyman_orthogonality_smoke() {
        let s = linear_iv_sample(4000, 2.0, 0.5, 14);
        let specs = NuisanceSpecs::all(LearnerSpec::Lasso(LassoSpec::default()));
        let fits = crossfit_nuisances(&s, &specs, 5, 0.01, 3).unwrap();
        let base = solve_beta(&fits, &s).unwrap().0;
        let naive_base = plug_in_ratio(&fits);
        let delta = 0.01;
        for which in 0..4 {
            for sign in [1.0, -1.0] {
                let mut f = fits.clone();
                let v = match which {
                    0 => &mut f.mu1,
                    1 => &mut f.mu0,
                    2 => &mut f.m1,
                    _ => &mut f.m0,
                };
                v.iter_mut().for_each(|x| *x += sign * delta);
                let orth = (solve_beta(&f, &s).unwrap().0 - base).abs();
                let naive = (plug_in_ratio(&f) - naive_base).abs();
                assert!(orth / naive < 0.2, "nuisance {which}: {orth} vs {naive}");
            }
        }
    }
}
