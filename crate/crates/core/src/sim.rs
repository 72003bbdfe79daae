//! Monte Carlo harness for the local monotonicity test: covariates from a
//! binarized latent normal, a type-share table with optional covariate
//! conditions, and rejection-rate tabulation.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CollapsedSample;
use crate::error::{Error, Result};
use crate::limtest::{lim_test, LimTestConfig};
use crate::rng;
use crate::stats::normal_quantile;
use crate::types::CombinedType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub covariate: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeShare {
    /// Treatment levels at the all-zeros and all-ones assignments.
    pub d00: f64,
    pub d11: f64,
    pub share: f64,
    pub condition: Option<Condition>,
}

impl TypeShare {
    pub fn new(d00: f64, d11: f64, share: f64) -> Self {
        Self { d00, d11, share, condition: None }
    }

    pub fn label(&self) -> String {
        let tag = match self.d11.partial_cmp(&self.d00) {
            Some(std::cmp::Ordering::Greater) => "cc",
            Some(std::cmp::Ordering::Less) => "cd",
            _ => "cn",
        };
        format!("{tag}_{}_{}", self.d00, self.d11)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeShareSpec {
    pub entries: Vec<TypeShare>,
}

impl TypeShareSpec {
    pub fn levels(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.entries.iter().flat_map(|e| [e.d00, e.d11]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InfeasibleScenario("no type shares".into()));
        }
        if let Some(e) = self.entries.iter().find(|e| !(e.share >= 0.0)) {
            return Err(Error::InfeasibleScenario(format!("negative share for {}", e.label())));
        }
        let total: f64 = self.entries.iter().map(|e| e.share).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InfeasibleScenario(format!("shares sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Type shares as level codes for the population margin-weight formula.
    pub fn coded(&self) -> Vec<(CombinedType, f64)> {
        let levels = self.levels();
        let code = |v: f64| levels.iter().position(|&l| l == v).unwrap_or(0) as u8;
        self.entries.iter().map(|e| (CombinedType::new(code(e.d00), code(e.d11)), e.share)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateModel {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Threshold each latent coordinate so that P(x = 1) equals this value;
    /// `None` keeps the latent normal draws.
    pub ones_probability: Option<Vec<f64>>,
}

impl CovariateModel {
    /// Equicorrelated unit-variance latent normals binarized to the given
    /// probabilities of one.
    pub fn binary(names: &[&str], probabilities: &[f64], correlation: f64) -> Self {
        let p = names.len();
        let covariance = (0..p).map(|i| (0..p).map(|j| if i == j { 1.0 } else { correlation }).collect()).collect();
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            mean: vec![0.0; p],
            covariance,
            ones_probability: Some(probabilities.to_vec()),
        }
    }

    fn p(&self) -> usize {
        self.names.len()
    }

    /// Population probability that covariate `k` equals `value`.
    pub fn stratum_probability(&self, k: usize, value: f64) -> Option<f64> {
        let p1 = self.ones_probability.as_ref()?[k];
        if value == 1.0 {
            Some(p1)
        } else if value == 0.0 {
            Some(1.0 - p1)
        } else {
            None
        }
    }

    /// Square-root factor of the covariance; fails unless symmetric PSD.
    fn factor(&self) -> Result<DMatrix<f64>> {
        let p = self.p();
        if self.mean.len() != p || self.covariance.len() != p || self.covariance.iter().any(|r| r.len() != p) {
            return Err(Error::InfeasibleScenario("covariate mean/covariance shapes differ from names".into()));
        }
        let m = DMatrix::from_fn(p, p, |i, j| self.covariance[i][j]);
        if (0..p).any(|i| (0..p).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
            return Err(Error::InfeasibleScenario("covariance is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(m);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
            return Err(Error::InfeasibleScenario("covariance is not positive semidefinite".into()));
        }
        let root = DVector::from_iterator(p, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub p_ztilde: f64,
    pub covariates: CovariateModel,
    pub shares: TypeShareSpec,
    pub seed: u64,
}

pub const COVARIATES: [&str; 4] = ["south", "smsa", "black", "married"];

fn valid_shares() -> Vec<TypeShare> {
    vec![
        TypeShare::new(12.0, 13.0, 0.15),
        TypeShare::new(13.0, 14.0, 0.10),
        TypeShare::new(12.0, 14.0, 0.05),
        TypeShare::new(12.0, 12.0, 0.25),
        TypeShare::new(13.0, 13.0, 0.20),
        TypeShare::new(14.0, 14.0, 0.25),
    ]
}

fn base_scenario(name: &str, entries: Vec<TypeShare>) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        n: 1500,
        p_ztilde: 0.5,
        covariates: CovariateModel::binary(&COVARIATES, &[0.4, 0.5, 0.5, 0.5], 0.2),
        shares: TypeShareSpec { entries },
        seed: 0,
    }
}

/// Violated preset with the southern defier share set to `share`; the
/// cc_{12,13} share absorbs the difference so the column still sums to one.
pub fn violated_with_defier_share(share: f64) -> Result<ScenarioConfig> {
    let mut entries = valid_shares();
    entries[0].share = 0.15 - share;
    if entries[0].share < 0.0 {
        return Err(Error::InfeasibleScenario(format!("defier share {share} exceeds 0.15")));
    }
    entries.push(TypeShare {
        d00: 13.0,
        d11: 12.0,
        share,
        condition: Some(Condition { covariate: "south".into(), value: 1.0 }),
    });
    Ok(base_scenario("lim-violated", entries))
}

pub fn builtin_scenarios() -> Vec<ScenarioConfig> {
    vec![
        base_scenario("lim-valid", valid_shares()),
        violated_with_defier_share(0.10).expect("preset is feasible"),
    ]
}

pub fn builtin_scenario(name: &str) -> Result<ScenarioConfig> {
    builtin_scenarios()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::invalid(format!("unknown scenario '{name}' (known: lim-valid, lim-violated)")))
}

impl ScenarioConfig {
    /// Apply `key=value`: n, p_ztilde, seed, correlation, prob.<covariate>,
    /// share.<label> (e.g. share.cd_13_12).
    pub fn apply_override(&mut self, text: &str) -> Result<()> {
        let (key, value) = text
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override must be key=value, got '{text}'")))?;
        let num = || value.parse::<f64>().map_err(|_| Error::invalid(format!("bad value in override '{text}'")));
        match key {
            "n" => self.n = value.parse().map_err(|_| Error::invalid(format!("bad n '{value}'")))?,
            "p_ztilde" => self.p_ztilde = num()?,
            "seed" => self.seed = value.parse().map_err(|_| Error::invalid(format!("bad seed '{value}'")))?,
            "correlation" => {
                let r = num()?;
                let c = &mut self.covariates.covariance;
                for (i, row) in c.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        if i != j {
                            *v = r;
                        }
                    }
                }
            }
            k if k.starts_with("prob.") => {
                let name = &k[5..];
                let idx = self.covariates.names.iter().position(|c| c == name);
                match (idx, self.covariates.ones_probability.as_mut()) {
                    (Some(i), Some(p)) => p[i] = num()?,
                    _ => return Err(Error::invalid(format!("no binary covariate '{name}'"))),
                }
            }
            k if k.starts_with("share.") => {
                let label = &k[6..];
                let v = num()?;
                let e = self
                    .shares
                    .entries
                    .iter_mut()
                    .find(|e| e.label() == label)
                    .ok_or_else(|| Error::invalid(format!("no type '{label}'")))?;
                e.share = v;
            }
            _ => return Err(Error::invalid(format!("unknown override key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InfeasibleScenario("n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_ztilde) {
            return Err(Error::InfeasibleScenario(format!("p_ztilde {} outside [0, 1]", self.p_ztilde)));
        }
        self.shares.validate()?;
        self.covariates.factor()?;
        self.allocation().map(|_| ())
    }

    /// Per-stratum type probabilities. Conditioned entries live only in their
    /// stratum with probability share / P(stratum); the remaining entries are
    /// rescaled within each stratum to fill it.
    fn allocation(&self) -> Result<Allocation> {
        let conditioned: Vec<usize> = (0..self.shares.entries.len()).filter(|&i| self.shares.entries[i].condition.is_some()).collect();
        let base: Vec<f64> = self.shares.entries.iter().map(|e| if e.condition.is_some() { 0.0 } else { e.share }).collect();
        let free: f64 = base.iter().sum();
        let Some(&first) = conditioned.first() else {
            return Ok(Allocation { stratum: None, inside: base.clone(), outside: base });
        };
        let cond = self.shares.entries[first].condition.clone().unwrap();
        if let Some(&other) = conditioned.iter().find(|&&i| self.shares.entries[i].condition.as_ref() != Some(&cond)) {
            return Err(Error::InfeasibleScenario(format!(
                "{}: all conditioned types must share one stratum",
                self.shares.entries[other].label()
            )));
        }
        let k = self
            .covariates
            .names
            .iter()
            .position(|c| *c == cond.covariate)
            .ok_or_else(|| Error::InfeasibleScenario(format!("condition on unknown covariate '{}'", cond.covariate)))?;
        let p_s = self
            .covariates
            .stratum_probability(k, cond.value)
            .ok_or_else(|| Error::InfeasibleScenario(format!("condition {}={} needs a binary covariate", cond.covariate, cond.value)))?;
        let mass: f64 = conditioned.iter().map(|&i| self.shares.entries[i].share).sum();
        if mass > p_s + 1e-12 {
            let e = &self.shares.entries[first];
            return Err(Error::InfeasibleScenario(format!(
                "{} share {} exceeds P({}={}) = {p_s}",
                e.label(),
                mass,
                cond.covariate,
                cond.value
            )));
        }
        let inside_free = 1.0 - mass / p_s;
        let scale = |w: f64| if free > 0.0 { w / free } else { 0.0 };
        let mut inside: Vec<f64> = base.iter().map(|&w| scale(w) * inside_free).collect();
        for &i in &conditioned {
            inside[i] = self.shares.entries[i].share / p_s;
        }
        let outside = base.iter().map(|&w| scale(w)).collect();
        Ok(Allocation { stratum: Some((k, cond.value)), inside, outside })
    }

    /// Analytic type shares within a covariate stratum (or overall).
    pub fn stratum_shares(&self, inside: bool) -> Result<Vec<(CombinedType, f64)>> {
        let a = self.allocation()?;
        let probs = if inside { &a.inside } else { &a.outside };
        Ok(self.shares.coded().into_iter().zip(probs).map(|((t, _), &p)| (t, p)).collect())
    }
}

struct Allocation {
    stratum: Option<(usize, f64)>,
    inside: Vec<f64>,
    outside: Vec<f64>,
}

fn draw_category(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding slack: last entry with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    /// Treatment is level-coded (0 = lowest level); the outcome is zero.
    pub sample: CollapsedSample,
    /// Index into the share table for each row.
    pub types: Vec<usize>,
    pub levels: Vec<f64>,
}

pub fn generate_scenario_detailed(config: &ScenarioConfig) -> Result<GeneratedScenario> {
    config.validate()?;
    let factor = config.covariates.factor()?;
    let alloc = config.allocation()?;
    let levels = config.shares.levels();
    let code = |v: f64| levels.iter().position(|&l| l == v).unwrap_or(0) as f64;
    let p = config.covariates.p();
    let cuts: Option<Vec<f64>> = config
        .covariates
        .ones_probability
        .as_ref()
        .map(|probs| (0..p).map(|k| config.covariates.mean[k] + factor.row(k).norm() * normal_quantile(1.0 - probs[k])).collect());
    let mut r = rng::stream(config.seed, &[0x5ce7]);
    let n = config.n;
    let mut x = Array2::zeros((n, p));
    let mut z = Array1::zeros(n);
    let mut d = Array1::zeros(n);
    let mut types = Vec::with_capacity(n);
    for i in 0..n {
        let e = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut r)));
        let latent = &factor * e;
        for k in 0..p {
            let v = config.covariates.mean[k] + latent[k];
            x[[i, k]] = match &cuts {
                Some(c) => f64::from(u8::from(v > c[k])),
                None => v,
            };
        }
        let zi = r.random::<f64>() < config.p_ztilde;
        z[i] = f64::from(u8::from(zi));
        let inside = alloc.stratum.is_some_and(|(k, value)| x[[i, k]] == value);
        let t = draw_category(if inside { &alloc.inside } else { &alloc.outside }, r.random::<f64>());
        let entry = &config.shares.entries[t];
        d[i] = code(if zi { entry.d11 } else { entry.d00 });
        types.push(t);
    }
    // degenerate instruments are allowed here; bypass the arm check
    let n1 = z.iter().filter(|&&v| v == 1.0).count();
    let sample = CollapsedSample {
        parent_indices: (0..n).collect(),
        z_tilde: z,
        y: Array1::zeros(n),
        d,
        x,
        n1,
        n0: n - n1,
        dropped_mixed: 0,
        covariate_names: config.covariates.names.clone(),
    };
    Ok(GeneratedScenario { sample, types, levels })
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<CollapsedSample> {
    generate_scenario_detailed(config).map(|g| g.sample)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginRate {
    pub margin: usize,
    pub level_below: Option<f64>,
    pub level_above: Option<f64>,
    pub rejections: usize,
    pub rate: f64,
    /// Root split variable of the deciding tree, counted over rejecting reps.
    pub first_split: BTreeMap<String, usize>,
    /// Share of rejecting reps whose deciding tree first splits on `south`.
    pub first_split_south: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub scenario: ScenarioConfig,
    pub test: LimTestConfig,
    pub reps: usize,
    pub completed: usize,
    pub failed: usize,
    pub failures: Vec<String>,
    pub margins: Vec<MarginRate>,
    pub any_rejection_rate: f64,
    /// Wall-clock seconds; left empty unless timing was requested.
    pub runtime_seconds: Option<f64>,
}

/// Per-margin (rejected, first split variable) for one rep.
type RepOutcome = Vec<(bool, Option<String>)>;

pub fn run_monte_carlo(config: &ScenarioConfig, reps: usize, test: &LimTestConfig) -> Result<McReport> {
    if reps == 0 {
        return Err(Error::invalid("reps must be >= 1"));
    }
    config.validate()?;
    let start = Instant::now();
    let outcomes: Vec<std::result::Result<RepOutcome, String>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut sc = config.clone();
            sc.seed = rng::derive_seed(config.seed, &[rep as u64, 0]);
            let mut tc = test.clone();
            tc.seed = rng::derive_seed(config.seed, &[rep as u64, 1]);
            let sample = generate_scenario(&sc).map_err(|e| format!("rep {rep}: {e}"))?;
            let report = lim_test(&sample, &tc).map_err(|e| format!("rep {rep}: {e}"))?;
            Ok(report.margins.iter().map(|m| (m.reject, m.first_split_variable.clone())).collect())
        })
        .collect();
    let levels = config.shares.levels();
    let j_max = levels.len().saturating_sub(1);
    let mut margins: Vec<MarginRate> = (1..=j_max)
        .map(|j| MarginRate {
            margin: j,
            level_below: levels.get(j - 1).copied(),
            level_above: levels.get(j).copied(),
            rejections: 0,
            rate: 0.0,
            first_split: BTreeMap::new(),
            first_split_south: None,
        })
        .collect();
    let mut failures = Vec::new();
    let mut any = 0usize;
    let mut completed = 0usize;
    for o in outcomes {
        match o {
            Err(e) => failures.push(e),
            Ok(per_margin) => {
                completed += 1;
                any += usize::from(per_margin.iter().any(|m| m.0));
                for (k, (reject, first)) in per_margin.into_iter().enumerate() {
                    let Some(m) = margins.get_mut(k) else { continue };
                    if reject {
                        m.rejections += 1;
                        *m.first_split.entry(first.unwrap_or_else(|| "(none)".into())).or_default() += 1;
                    }
                }
            }
        }
    }
    for m in &mut margins {
        m.rate = if completed > 0 { m.rejections as f64 / completed as f64 } else { 0.0 };
        m.first_split_south = (m.rejections > 0).then(|| *m.first_split.get("south").unwrap_or(&0) as f64 / m.rejections as f64);
    }
    Ok(McReport {
        scenario: config.clone(),
        test: test.clone(),
        reps,
        completed,
        failed: failures.len(),
        failures,
        margins,
        any_rejection_rate: if completed > 0 { any as f64 / completed as f64 } else { 0.0 },
        runtime_seconds: Some(start.elapsed().as_secs_f64()),
    })
}

/// Randomized-instrument linear IV sample with a homogeneous effect `beta`:
/// d = 0.5 + z̃ + 0.5 x₁ + u, y = beta·d + x₁ − 0.5 x₂ + 0.5 u + e.
pub fn linear_iv_sample(n: usize, beta: f64, p_z: f64, seed: u64) -> CollapsedSample {
    let mut r = rng::stream(seed, &[0x11e]);
    let mut x = Array2::zeros((n, 3));
    let mut z = Array1::zeros(n);
    let mut d = Array1::zeros(n);
    let mut y = Array1::zeros(n);
    for i in 0..n {
        for k in 0..3 {
            x[[i, k]] = StandardNormal.sample(&mut r);
        }
        z[i] = f64::from(u8::from(r.random::<f64>() < p_z));
        let u: f64 = StandardNormal.sample(&mut r);
        let e: f64 = StandardNormal.sample(&mut r);
        d[i] = 0.5 + z[i] + 0.5 * x[[i, 0]] + u;
        y[i] = beta * d[i] + x[[i, 0]] - 0.5 * x[[i, 1]] + 0.5 * u + e;
    }
    // guarantee both arms for tiny n
    if z.iter().all(|&v| v == 1.0) || z.iter().all(|&v| v == 0.0) {
        z[0] = 1.0 - z[0];
    }
    CollapsedSample::from_parts(y, d, z, x, vec!["x1".into(), "x2".into(), "x3".into()]).expect("both arms present")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::population_margin_weights;

    #[test]
    fn presets() {
        for s in builtin_scenarios() {
            let total: f64 = s.shares.entries.iter().map(|e| e.share).sum();
            assert!((total - 1.0).abs() < 1e-12, "{}", s.name);
            assert_eq!(s.shares.levels(), vec![12.0, 13.0, 14.0]);
            s.validate().unwrap();
        }
        let v = builtin_scenario("lim-violated").unwrap();
        assert_eq!(v.shares.entries.iter().filter(|e| e.condition.is_some()).count(), 1);
        let valid = builtin_scenario("lim-valid").unwrap();
        assert!(valid.shares.entries.iter().all(|e| e.condition.is_none()));
        assert!(builtin_scenario("nope").is_err());
    }

    #[test]
    fn population_weights_of_presets() {
        let valid = builtin_scenario("lim-valid").unwrap();
        let w = population_margin_weights(&valid.shares.coded(), 2).unwrap();
        assert!((w.raw[0] - 0.20).abs() < 1e-12 && (w.raw[1] - 0.15).abs() < 1e-12);
        let viol = builtin_scenario("lim-violated").unwrap();
        let w = population_margin_weights(&viol.shares.coded(), 2).unwrap();
        assert!(w.raw[0].abs() < 1e-12);
        let south = population_margin_weights(&viol.stratum_shares(true).unwrap(), 2).unwrap();
        assert!(south.raw[0] < 0.0);
        let rest = population_margin_weights(&viol.stratum_shares(false).unwrap(), 2).unwrap();
        assert!(rest.raw[0] > 0.0);
        // stratum mixture recovers the overall weights
        let mix = 0.4 * south.raw[0] + 0.6 * rest.raw[0];
        assert!(mix.abs() < 1e-12);
    }

    #[test]
    fn realized_type_frequencies() {
        let mut s = builtin_scenario("lim-valid").unwrap();
        s.seed = 17;
        let g = generate_scenario_detailed(&s).unwrap();
        let n = s.n as f64;
        for (k, e) in s.shares.entries.iter().enumerate() {
            let f = g.types.iter().filter(|&&t| t == k).count() as f64 / n;
            let se = (e.share * (1.0 - e.share) / n).sqrt();
            assert!((f - e.share).abs() < 3.0 * se, "{}: {f}", e.label());
        }
        let south = g.sample.x.column(0).mean().unwrap();
        assert!((south - 0.4).abs() < 3.0 * (0.24f64 / n).sqrt());
    }

    #[test]
    fn defiers_only_in_south() {
        let mut s = builtin_scenario("lim-violated").unwrap();
        s.seed = 3;
        let g = generate_scenario_detailed(&s).unwrap();
        let defier = s.shares.entries.iter().position(|e| e.condition.is_some()).unwrap();
        for i in 0..s.n {
            if g.types[i] == defier {
                assert_eq!(g.sample.x[[i, 0]], 1.0);
            }
        }
    }

    #[test]
    fn degenerate_instrument() {
        let mut s = builtin_scenario("lim-valid").unwrap();
        s.p_ztilde = 1.0;
        s.n = 200;
        let g = generate_scenario_detailed(&s).unwrap();
        assert!(g.sample.z_tilde.iter().all(|&v| v == 1.0));
        for i in 0..200 {
            let e = &s.shares.entries[g.types[i]];
            assert_eq!(g.levels[g.sample.d[i] as usize], e.d11);
        }
    }

    #[test]
    fn infeasible_condition_is_named() {
        let mut s = builtin_scenario("lim-violated").unwrap();
        s.apply_override("prob.south=0.05").unwrap();
        match s.validate() {
            Err(Error::InfeasibleScenario(msg)) => assert!(msg.contains("cd_13_12"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conditional_cdfs_converge() {
        let mut s = builtin_scenario("lim-violated").unwrap();
        s.n = 100_000;
        s.seed = 5;
        let g = generate_scenario(&s).unwrap();
        let n = g.n() as f64;
        let bound = 3.0 * (n.ln() / n).sqrt();
        for zv in [0.0, 1.0] {
            let rows: Vec<usize> = (0..g.n()).filter(|&i| g.z_tilde[i] == zv).collect();
            for j in 0..3 {
                let emp = rows.iter().filter(|&&i| g.d[i] <= j as f64).count() as f64 / rows.len() as f64;
                let pop: f64 = s
                    .shares
                    .coded()
                    .iter()
                    .filter(|(t, _)| (if zv == 1.0 { t.d11 } else { t.d00 }) as usize <= j)
                    .map(|(_, p)| p)
                    .sum();
                assert!((emp - pop).abs() < bound, "z={zv} j={j}: {emp} vs {pop}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = builtin_scenario("lim-violated").unwrap();
        let a = generate_scenario(&s).unwrap();
        let b = generate_scenario(&s).unwrap();
        assert_eq!(a.d, b.d);
        assert_eq!(a.x, b.x);
        assert_eq!(a.z_tilde, b.z_tilde);
    }

    #[test]
    fn overrides() {
        let mut s = builtin_scenario("lim-valid").unwrap();
        s.apply_override("n=300").unwrap();
        s.apply_override("correlation=0.5").unwrap();
        s.apply_override("share.cc_12_13=0.15").unwrap();
        assert_eq!(s.n, 300);
        assert_eq!(s.covariates.covariance[0][1], 0.5);
        assert!(s.apply_override("bogus=1").is_err());
        assert!(s.apply_override("n").is_err());
        s.apply_override("correlation=1.5").unwrap();
        assert!(s.validate().is_err());
    }

    #[test]
    fn single_rep_rates_are_binary() {
        let mut s = builtin_scenario("lim-violated").unwrap();
        s.n = 600;
        let test = LimTestConfig {
            forest: crate::learners::ForestSpec { n_trees: 30, min_leaf: 10, ..Default::default() },
            causal_forest: crate::learners::CausalForestSpec { n_trees: 30, min_leaf: 10, ..Default::default() },
            ..Default::default()
        };
        let r = run_monte_carlo(&s, 1, &test).unwrap();
        assert_eq!(r.completed + r.failed, 1);
        assert!(r.margins.iter().all(|m| m.rate == 0.0 || m.rate == 1.0));
    }
}
