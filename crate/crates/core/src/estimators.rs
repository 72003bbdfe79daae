//! Covariate-free estimation on the outer-support subsample.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CollapsedSample, IvDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::two_sided_critical;
use crate::types::{Assignment, CombinedKind, CombinedType};

/// Tolerance used for exact (population or identity) computations.
pub const EXACT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CcAcrEstimate {
    pub beta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub n1: usize,
    pub n0: usize,
    pub dropped_mixed: usize,
    /// Sign of the treatment mean difference.
    pub orientation: i8,
    pub negative_orientation_warning: bool,
}

fn arm_means(s: &CollapsedSample) -> ((f64, f64), (f64, f64)) {
    let (mut y1, mut d1, mut y0, mut d0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..s.n() {
        if s.z_tilde[i] == 1.0 {
            y1 += s.y[i];
            d1 += s.d[i];
        } else {
            y0 += s.y[i];
            d0 += s.d[i];
        }
    }
    let (n1, n0) = (s.n1 as f64, s.n0 as f64);
    ((y1 / n1, d1 / n1), (y0 / n0, d0 / n0))
}

/// Wald ratio of outcome and treatment mean differences across the
/// collapsed instrument, with a delta-method standard error.
pub fn cc_acr_wald(s: &CollapsedSample, ci_level: f64) -> Result<CcAcrEstimate> {
    if s.n1 < 2 || s.n0 < 2 {
        return Err(Error::invalid(format!("each arm needs >= 2 rows (n1={}, n0={})", s.n1, s.n0)));
    }
    if !(0.0 < ci_level && ci_level < 1.0) {
        return Err(Error::invalid("ci level must lie in (0, 1)"));
    }
    let ((y1, d1), (y0, d0)) = arm_means(s);
    let numerator = y1 - y0;
    let denominator = d1 - d0;
    if denominator == 0.0 {
        return Err(Error::IrrelevantInstrument);
    }
    let beta = numerator / denominator;

    // influence of each arm mean on beta: (y - beta d) centred within arm
    let (mut v1, mut v0) = (0.0, 0.0);
    for i in 0..s.n() {
        if s.z_tilde[i] == 1.0 {
            v1 += ((s.y[i] - y1) - beta * (s.d[i] - d1)).powi(2);
        } else {
            v0 += ((s.y[i] - y0) - beta * (s.d[i] - d0)).powi(2);
        }
    }
    let (n1, n0) = (s.n1 as f64, s.n0 as f64);
    let se = ((v1 / n1) / n1 + (v0 / n0) / n0).sqrt() / denominator.abs();
    let crit = two_sided_critical(ci_level);
    let orientation = if denominator > 0.0 { 1 } else { -1 };
    Ok(CcAcrEstimate {
        beta,
        se,
        ci_low: beta - crit * se,
        ci_high: beta + crit * se,
        ci_level,
        numerator,
        denominator,
        n1: s.n1,
        n0: s.n0,
        dropped_mixed: s.dropped_mixed,
        orientation,
        negative_orientation_warning: orientation < 0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginWeights {
    /// Margin j covers the step from level j-1 to level j.
    pub margins: Vec<usize>,
    /// P(D < j | z=0) - P(D < j | z=1).
    pub raw: Vec<f64>,
    /// raw / sum(raw); `None` when the sum is zero (no compliers).
    pub normalized: Option<Vec<f64>>,
    pub lim_consistent: bool,
    pub tolerance: f64,
}

impl MarginWeights {
    fn from_raw(raw: Vec<f64>, tolerance: f64) -> Self {
        let total: f64 = raw.iter().sum();
        let normalized = (total.abs() > EXACT_TOLERANCE).then(|| raw.iter().map(|r| r / total).collect());
        let lim_consistent = raw.iter().all(|&r| r >= -tolerance);
        Self {
            margins: (1..=raw.len()).collect(),
            raw,
            normalized,
            lim_consistent,
            tolerance,
        }
    }

    pub fn total(&self) -> f64 {
        self.raw.iter().sum()
    }
}

fn integer_codes(d: &[f64]) -> Result<Vec<usize>> {
    d.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(Error::NotIntegerCoded(v))
            }
        })
        .collect()
}

pub fn margin_weights(s: &CollapsedSample) -> Result<MarginWeights> {
    margin_weights_with_tolerance(s, EXACT_TOLERANCE)
}

/// Empirical margin weights from the arm-wise CDFs of an integer-coded treatment.
pub fn margin_weights_with_tolerance(s: &CollapsedSample, tolerance: f64) -> Result<MarginWeights> {
    let codes = integer_codes(s.d.as_slice().unwrap_or(&s.d.to_vec()))?;
    let top = codes.iter().copied().max().unwrap_or(0);
    if top == 0 {
        return Err(Error::invalid("margin weights need at least two treatment levels (J = 0)"));
    }
    if s.n1 == 0 || s.n0 == 0 {
        return Err(Error::OuterSupportEmpty { n1: s.n1, n0: s.n0 });
    }
    let mut counts = [vec![0usize; top + 1], vec![0usize; top + 1]];
    for (i, &c) in codes.iter().enumerate() {
        counts[(s.z_tilde[i] == 1.0) as usize][c] += 1;
    }
    let (n0, n1) = (s.n0 as f64, s.n1 as f64);
    let mut raw = Vec::with_capacity(top);
    let (mut below0, mut below1) = (0usize, 0usize);
    for j in 1..=top {
        below0 += counts[0][j - 1];
        below1 += counts[1][j - 1];
        raw.push(below0 as f64 / n0 - below1 as f64 / n1);
    }
    Ok(MarginWeights::from_raw(raw, tolerance))
}

/// Population margin weights implied by combined-type shares:
/// sum of complier mass crossing margin j minus defier mass crossing it.
pub fn population_margin_weights(shares: &[(CombinedType, f64)], top_level: usize) -> Result<MarginWeights> {
    if top_level == 0 {
        return Err(Error::invalid("J = 0"));
    }
    let mut raw = vec![0.0; top_level];
    for &(t, share) in shares {
        let (lo, hi) = (t.d00 as usize, t.d11 as usize);
        if lo > top_level || hi > top_level {
            return Err(Error::invalid(format!("type {t} outside levels 0..{top_level}")));
        }
        match t.kind {
            CombinedKind::Cc => (lo + 1..=hi).for_each(|j| raw[j - 1] += share),
            CombinedKind::Cd => (hi + 1..=lo).for_each(|j| raw[j - 1] -= share),
            CombinedKind::Cn => {}
        }
    }
    Ok(MarginWeights::from_raw(raw, EXACT_TOLERANCE))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightCurve {
    pub grid: Vec<f64>,
    /// P(D >= t | z=1) - P(D >= t | z=0).
    pub raw: Vec<f64>,
    pub integral: f64,
    pub normalized: Option<Vec<f64>>,
    /// Grid indices with negative raw weight.
    pub flagged: Vec<usize>,
}

fn survival(sorted: &[f64], t: f64) -> f64 {
    let below = sorted.partition_point(|&v| v < t);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

pub fn weight_curve_continuous(s: &CollapsedSample, grid: &[f64]) -> Result<WeightCurve> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("grid must be strictly ascending with >= 2 points"));
    }
    let mut arms = [Vec::with_capacity(s.n0), Vec::with_capacity(s.n1)];
    for i in 0..s.n() {
        arms[(s.z_tilde[i] == 1.0) as usize].push(s.d[i]);
    }
    if arms[0].is_empty() || arms[1].is_empty() {
        return Err(Error::OuterSupportEmpty { n1: s.n1, n0: s.n0 });
    }
    arms.iter_mut().for_each(|a| a.sort_by(f64::total_cmp));
    let raw: Vec<f64> = grid.iter().map(|&t| survival(&arms[1], t) - survival(&arms[0], t)).collect();
    let integral: f64 = grid
        .windows(2)
        .zip(raw.windows(2))
        .map(|(g, r)| 0.5 * (g[1] - g[0]) * (r[0] + r[1]))
        .sum();
    let normalized = (integral.abs() > EXACT_TOLERANCE).then(|| raw.iter().map(|r| r / integral).collect());
    let flagged = raw.iter().enumerate().filter(|(_, &r)| r < 0.0).map(|(i, _)| i).collect();
    Ok(WeightCurve { grid: grid.to_vec(), raw, integral, normalized, flagged })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportPoint {
    /// Assignments pooled into this point (several when first-stage means tie).
    pub assignments: Vec<String>,
    pub n: usize,
    pub share: f64,
    pub mean_d: f64,
    pub mean_y: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TslsDecomposition {
    pub support: Vec<SupportPoint>,
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta_wald: Vec<f64>,
    pub mu: Vec<f64>,
    pub beta_tsls: f64,
    pub weight_sum: f64,
}

fn support_cells(data: &IvDataset) -> Vec<SupportPoint> {
    let k = data.n_instruments();
    let mut cells: BTreeMap<u32, (usize, f64, f64)> = BTreeMap::new();
    for i in 0..data.n() {
        let e = cells.entry(data.assignment(i)).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += data.d[i];
        e.2 += data.y[i];
    }
    let n = data.n() as f64;
    let mut pts: Vec<(u32, SupportPoint)> = cells
        .into_iter()
        .map(|(bits, (c, sd, sy))| {
            let label = Assignment { bits, k: k as u8 }.to_string();
            (
                bits,
                SupportPoint {
                    assignments: vec![label],
                    n: c,
                    share: c as f64 / n,
                    mean_d: sd / c as f64,
                    mean_y: sy / c as f64,
                },
            )
        })
        .collect();
    pts.sort_by(|a, b| a.1.mean_d.total_cmp(&b.1.mean_d).then(a.0.cmp(&b.0)));

    let mut merged: Vec<SupportPoint> = Vec::new();
    for (_, p) in pts {
        match merged.last_mut() {
            Some(last) if last.mean_d == p.mean_d => {
                let total = last.n + p.n;
                last.mean_y = (last.mean_y * last.n as f64 + p.mean_y * p.n as f64) / total as f64;
                last.n = total;
                last.share = total as f64 / n;
                last.assignments.extend(p.assignments);
            }
            _ => merged.push(p),
        }
    }
    merged
}

/// Pairwise-Wald decomposition of the saturated TSLS estimate along the
/// support ordered by first-stage mean.
pub fn tsls_decomposition(data: &IvDataset) -> Result<TslsDecomposition> {
    let support = support_cells(data);
    if support.len() < 2 {
        return Err(Error::DegenerateFirstStage("all first-stage means are equal".into()));
    }
    let mean_d: f64 = support.iter().map(|p| p.share * p.mean_d).sum();
    let scale: f64 = support.iter().map(|p| p.share * p.mean_d * (p.mean_d - mean_d)).sum();
    if !(scale.abs() > 0.0) {
        return Err(Error::DegenerateFirstStage("no first-stage variation".into()));
    }
    let m_max = support.len() - 1;
    let (mut omega, mut delta, mut beta_wald, mut mu) = (vec![], vec![], vec![], vec![]);
    for m in 1..=m_max {
        let upper = &support[m..];
        let lower = &support[..m];
        let p_up: f64 = upper.iter().map(|p| p.share).sum();
        let e_up = upper.iter().map(|p| p.share * p.mean_d).sum::<f64>() / p_up;
        let e_lo = lower.iter().map(|p| p.share * p.mean_d).sum::<f64>() / (1.0 - p_up);
        let w = (1.0 - p_up) * p_up * (e_up - e_lo) / scale;
        let dd = support[m].mean_d - support[m - 1].mean_d;
        if dd == 0.0 {
            return Err(Error::UndefinedPairwiseWald {
                lower: support[m - 1].assignments.join("+"),
                upper: support[m].assignments.join("+"),
            });
        }
        let b = (support[m].mean_y - support[m - 1].mean_y) / dd;
        omega.push(w);
        delta.push(dd);
        beta_wald.push(b);
        mu.push(dd * w);
    }
    let beta_tsls = mu.iter().zip(&beta_wald).map(|(m, b)| m * b).sum();
    let weight_sum = mu.iter().sum();
    Ok(TslsDecomposition { support, omega, delta, beta_wald, mu, beta_tsls, weight_sum })
}

/// Two-stage estimate with a saturated first stage: fitted treatment is the
/// cell mean of each realised assignment, then y is regressed on it.
pub fn tsls_saturated(data: &IvDataset) -> Result<f64> {
    let mut cells: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for i in 0..data.n() {
        let e = cells.entry(data.assignment(i)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += data.d[i];
    }
    let fitted: Vec<f64> = (0..data.n())
        .map(|i| {
            let (c, s) = cells[&data.assignment(i)];
            s / c as f64
        })
        .collect();
    let n = data.n() as f64;
    let fbar = fitted.iter().sum::<f64>() / n;
    let ybar = data.y.sum() / n;
    let sxx: f64 = fitted.iter().map(|f| (f - fbar).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateFirstStage("fitted treatment is constant".into()));
    }
    let sxy: f64 = fitted.iter().zip(data.y.iter()).map(|(f, y)| (f - fbar) * (y - ybar)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominanceTest {
    /// max_t F1(t) - F0(t), clipped at zero.
    pub statistic: f64,
    pub p_value: f64,
    pub resamples: usize,
    pub seed: u64,
    /// Pooled support points where F1 exceeds F0.
    pub crossings: Vec<f64>,
}

/// One-sided sup of F1 - F0 over the pooled support. `labels` are in the
/// order of `sorted_values`.
fn dominance_statistic(sorted_values: &[f64], labels: &[bool], n1: usize, n0: usize) -> f64 {
    let (mut c1, mut c0) = (0usize, 0usize);
    let mut best = 0.0f64;
    let n = sorted_values.len();
    let mut i = 0;
    while i < n {
        let v = sorted_values[i];
        while i < n && sorted_values[i] == v {
            if labels[i] {
                c1 += 1;
            } else {
                c0 += 1;
            }
            i += 1;
        }
        best = best.max(c1 as f64 / n1 as f64 - c0 as f64 / n0 as f64);
    }
    best
}

/// Permutation test of first-order stochastic dominance of the z=1 treatment
/// distribution over the z=0 distribution.
pub fn ks_dominance_test(s: &CollapsedSample, resamples: usize, seed: u64) -> Result<DominanceTest> {
    if s.n1 == 0 || s.n0 == 0 {
        return Err(Error::OuterSupportEmpty { n1: s.n1, n0: s.n0 });
    }
    if resamples == 0 {
        return Err(Error::invalid("resamples must be >= 1"));
    }
    let mut order: Vec<usize> = (0..s.n()).collect();
    order.sort_by(|&a, &b| s.d[a].total_cmp(&s.d[b]));
    let values: Vec<f64> = order.iter().map(|&i| s.d[i]).collect();
    let labels: Vec<bool> = order.iter().map(|&i| s.z_tilde[i] == 1.0).collect();
    let statistic = dominance_statistic(&values, &labels, s.n1, s.n0);

    let mut crossings = Vec::new();
    let (mut c1, mut c0) = (0usize, 0usize);
    let mut i = 0;
    while i < values.len() {
        let v = values[i];
        while i < values.len() && values[i] == v {
            if labels[i] { c1 += 1 } else { c0 += 1 }
            i += 1;
        }
        if c1 as f64 / s.n1 as f64 - c0 as f64 / s.n0 as f64 > EXACT_TOLERANCE {
            crossings.push(v);
        }
    }

    let exceed: usize = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut perm = labels.clone();
            perm.shuffle(&mut rng::stream(seed, &[r as u64]));
            usize::from(dominance_statistic(&values, &perm, s.n1, s.n0) >= statistic - 1e-14)
        })
        .sum();
    let p_value = (exceed + 1) as f64 / (resamples + 1) as f64;
    Ok(DominanceTest { statistic, p_value, resamples, seed, crossings })
}
