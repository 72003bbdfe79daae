//! Tabular ingestion and the outer-support subsample.
//!
//! [`IvDataset`] holds the raw analysis unit. [`collapse_instruments`] keeps
//! only rows where every instrument is 1 or every instrument is 0 and builds
//! the single collapsed instrument from them; everything downstream consumes
//! the resulting [`CollapsedSample`].

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvDataset {
    pub y: Array1<f64>,
    pub d: Array1<f64>,
    /// n x K, entries exactly 0 or 1.
    pub z: Array2<u8>,
    /// n x p covariates.
    pub x: Array2<f64>,
    pub outcome_name: String,
    pub treatment_name: String,
    pub instrument_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Rows removed by instrument binarization before the dataset was built.
    pub binarize_dropped: usize,
}

impl IvDataset {
    pub fn new(
        y: Array1<f64>,
        d: Array1<f64>,
        z: Array2<u8>,
        x: Array2<f64>,
        instrument_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::NoObservations);
        }
        if d.len() != n || z.nrows() != n || x.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "y={n}, d={}, z={}, x={}",
                d.len(),
                z.nrows(),
                x.nrows()
            )));
        }
        if z.ncols() == 0 {
            return Err(Error::invalid("at least one instrument is required"));
        }
        if instrument_names.len() != z.ncols() || covariate_names.len() != x.ncols() {
            return Err(Error::ShapeMismatch("column names do not match matrix widths".into()));
        }
        for ((row, col), &v) in z.indexed_iter() {
            if v > 1 {
                return Err(Error::NonBinaryInstrument {
                    row,
                    column: instrument_names[col].clone(),
                    value: f64::from(v),
                });
            }
        }
        let finite = |v: &f64| v.is_finite();
        if !y.iter().all(finite) || !d.iter().all(finite) || !x.iter().all(finite) {
            return Err(Error::invalid("non-finite value in dataset"));
        }
        Ok(Self {
            y,
            d,
            z,
            x,
            outcome_name: "y".into(),
            treatment_name: "d".into(),
            instrument_names,
            covariate_names,
            binarize_dropped: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_instruments(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Instrument assignment of row `i` packed into bits, first instrument
    /// in the most significant position.
    pub fn assignment(&self, i: usize) -> u32 {
        self.z
            .row(i)
            .iter()
            .fold(0u32, |acc, &v| (acc << 1) | u32::from(v))
    }
}

/// Request to convert a continuous column into a binary instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizeRule {
    pub column: String,
    pub low: f64,
    pub high: f64,
}

impl BinarizeRule {
    /// Parse `col:low:high`; `col` alone uses the quartile defaults.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad percentile `{p}` in `{s}`")))
        };
        match parts.as_slice() {
            [col] => Ok(Self { column: col.to_string(), low: 0.25, high: 0.75 }),
            [col, lo, hi] => Ok(Self { column: col.to_string(), low: num(lo)?, high: num(hi)? }),
            _ => Err(Error::invalid(format!("expected col:low:high, got `{s}`"))),
        }
    }
}

/// Column bindings for [`load_csv`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CsvSpec {
    pub outcome: String,
    pub treatment: String,
    pub instruments: Vec<String>,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub binarize: Vec<BinarizeRule>,
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Err(Error::MissingValue { row, column: column.to_string() });
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumeric { row, column: column.to_string(), value: t.to_string() }),
    }
}

/// Read a comma-separated file with a header row. Row numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>, spec: &CsvSpec) -> Result<IvDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let index_of = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let mut wanted: Vec<&str> = vec![&spec.outcome, &spec.treatment];
    wanted.extend(spec.instruments.iter().map(String::as_str));
    wanted.extend(spec.covariates.iter().map(String::as_str));
    let idx: Vec<usize> = wanted.iter().map(|c| index_of(c)).collect::<Result<_>>()?;
    for rule in &spec.binarize {
        if !spec.instruments.contains(&rule.column) {
            return Err(Error::invalid(format!("binarized column `{}` is not an instrument", rule.column)));
        }
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (c, &i) in idx.iter().enumerate() {
            let raw = record.get(i).unwrap_or("");
            columns[c].push(parse_cell(raw, row, wanted[c])?);
        }
    }
    let n = columns[0].len();
    if n == 0 {
        return Err(Error::NoObservations);
    }

    let k = spec.instruments.len();
    let p = spec.covariates.len();
    let mut keep = vec![true; n];
    for rule in &spec.binarize {
        let c = 2 + spec.instruments.iter().position(|s| s == &rule.column).unwrap_or(0);
        let bin = binarize_instrument(&columns[c], rule.low, rule.high)?;
        for i in 0..n {
            keep[i] &= bin.retained[i];
            columns[c][i] = f64::from(bin.values[i]);
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    if rows.is_empty() {
        return Err(Error::NoObservations);
    }

    let pick = |c: usize| Array1::from_iter(rows.iter().map(|&i| columns[c][i]));
    let y = pick(0);
    let d = pick(1);
    let mut z = Array2::<u8>::zeros((rows.len(), k));
    for j in 0..k {
        for (out, &i) in rows.iter().enumerate() {
            let v = columns[2 + j][i];
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryInstrument {
                    row: i + 1,
                    column: spec.instruments[j].clone(),
                    value: v,
                });
            }
            z[[out, j]] = v as u8;
        }
    }
    let mut x = Array2::<f64>::zeros((rows.len(), p));
    for j in 0..p {
        for (out, &i) in rows.iter().enumerate() {
            x[[out, j]] = columns[2 + k + j][i];
        }
    }
    let mut ds = IvDataset::new(y, d, z, x, spec.instruments.clone(), spec.covariates.clone())?;
    ds.outcome_name = spec.outcome.clone();
    ds.treatment_name = spec.treatment.clone();
    ds.binarize_dropped = n - rows.len();
    Ok(ds)
}

/// Outer-support subsample with the collapsed binary instrument.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapsedSample {
    pub parent_indices: Vec<usize>,
    pub z_tilde: Array1<f64>,
    pub y: Array1<f64>,
    pub d: Array1<f64>,
    pub x: Array2<f64>,
    pub n1: usize,
    pub n0: usize,
    /// Rows of the parent dataset dropped because their instruments were mixed.
    pub dropped_mixed: usize,
    pub covariate_names: Vec<String>,
}

impl CollapsedSample {
    /// Build a sample directly (simulation, tests). Fails when either arm is empty.
    pub fn from_parts(
        y: Array1<f64>,
        d: Array1<f64>,
        z_tilde: Array1<f64>,
        x: Array2<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = z_tilde.len();
        if y.len() != n || d.len() != n || x.nrows() != n {
            return Err(Error::ShapeMismatch("collapsed sample columns differ in length".into()));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::ShapeMismatch("covariate names do not match x".into()));
        }
        if z_tilde.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("z_tilde must be 0/1"));
        }
        let n1 = z_tilde.iter().filter(|&&v| v == 1.0).count();
        let n0 = n - n1;
        if n1 == 0 || n0 == 0 {
            return Err(Error::OuterSupportEmpty { n1, n0 });
        }
        Ok(Self {
            parent_indices: (0..n).collect(),
            z_tilde,
            y,
            d,
            x,
            n1,
            n0,
            dropped_mixed: 0,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.z_tilde.len()
    }

    /// Rows at the given positions. Arm counts are recomputed and may be zero.
    pub fn subset(&self, rows: &[usize]) -> CollapsedSample {
        let z_tilde = self.z_tilde.select(Axis(0), rows);
        let n1 = z_tilde.iter().filter(|&&v| v == 1.0).count();
        CollapsedSample {
            parent_indices: rows.iter().map(|&i| self.parent_indices[i]).collect(),
            y: self.y.select(Axis(0), rows),
            d: self.d.select(Axis(0), rows),
            x: self.x.select(Axis(0), rows),
            n1,
            n0: rows.len() - n1,
            z_tilde,
            dropped_mixed: self.dropped_mixed,
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Positions of rows in arm `z` (0 or 1).
    pub fn arm(&self, z: u8) -> Vec<usize> {
        let target = f64::from(z);
        (0..self.n()).filter(|&i| self.z_tilde[i] == target).collect()
    }

    /// Replace the treatment by its rank codes.
    pub fn encode_treatment(&self) -> Result<(CollapsedSample, TreatmentEncoding)> {
        let (codes, enc) = encode_treatment_levels(self.d.as_slice().unwrap_or(&self.d.to_vec()))?;
        let mut out = self.clone();
        out.d = codes.iter().map(|&c| c as f64).collect();
        Ok((out, enc))
    }
}

pub fn collapse_instruments(data: &IvDataset) -> Result<CollapsedSample> {
    let k = data.n_instruments();
    let all_ones = (1u32 << k) - 1;
    let mut rows = Vec::new();
    let mut zt = Vec::new();
    for i in 0..data.n() {
        match data.assignment(i) {
            a if a == all_ones => {
                rows.push(i);
                zt.push(1.0);
            }
            0 => {
                rows.push(i);
                zt.push(0.0);
            }
            _ => {}
        }
    }
    let n1 = zt.iter().filter(|&&v| v == 1.0).count();
    let n0 = zt.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::OuterSupportEmpty { n1, n0 });
    }
    Ok(CollapsedSample {
        z_tilde: Array1::from(zt),
        y: data.y.select(Axis(0), &rows),
        d: data.d.select(Axis(0), &rows),
        x: data.x.select(Axis(0), &rows),
        n1,
        n0,
        dropped_mixed: data.n() - rows.len(),
        parent_indices: rows,
        covariate_names: data.covariate_names.clone(),
    })
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Binarized {
    /// 0/1 on retained rows; 0 on masked rows.
    pub values: Vec<u8>,
    pub retained: Vec<bool>,
    pub low_cut: f64,
    pub high_cut: f64,
}

/// Values at or below the low quantile map to 0, values at or above the high
/// quantile map to 1, interior values are masked out.
pub fn binarize_instrument(values: &[f64], low_percentile: f64, high_percentile: f64) -> Result<Binarized> {
    if !(0.0..=1.0).contains(&low_percentile)
        || !(0.0..=1.0).contains(&high_percentile)
        || low_percentile >= high_percentile
    {
        return Err(Error::invalid(format!(
            "percentiles must satisfy 0 <= low < high <= 1, got ({low_percentile}, {high_percentile})"
        )));
    }
    if values.is_empty() {
        return Err(Error::NoObservations);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let low_cut = quantile_type7(&sorted, low_percentile);
    let high_cut = quantile_type7(&sorted, high_percentile);
    if low_cut == high_cut {
        return Err(Error::CutoffsCoincide(low_cut));
    }
    let mut out = Binarized {
        values: Vec::with_capacity(values.len()),
        retained: Vec::with_capacity(values.len()),
        low_cut,
        high_cut,
    };
    for &v in values {
        if v <= low_cut {
            out.values.push(0);
            out.retained.push(true);
        } else if v >= high_cut {
            out.values.push(1);
            out.retained.push(true);
        } else {
            out.values.push(0);
            out.retained.push(false);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentEncoding {
    /// Distinct observed levels, ascending; the code of `levels[r]` is `r`.
    pub levels: Vec<f64>,
    /// False when the observed levels are not consecutive integers, in which
    /// case rank coding rescales the CC-ACR denominator.
    pub consecutive_integers: bool,
}

impl TreatmentEncoding {
    pub fn max_code(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn warning(&self) -> bool {
        !self.consecutive_integers
    }

    pub fn code(&self, level: f64) -> Option<usize> {
        self.levels.binary_search_by(|l| l.total_cmp(&level)).ok()
    }

    pub fn decode(&self, code: usize) -> Option<f64> {
        self.levels.get(code).copied()
    }
}

pub fn encode_treatment_levels(d: &[f64]) -> Result<(Vec<usize>, TreatmentEncoding)> {
    let mut levels = d.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::ConstantTreatment);
    }
    let consecutive_integers = levels.iter().all(|l| l.fract() == 0.0)
        && levels.windows(2).all(|w| w[1] - w[0] == 1.0);
    let enc = TreatmentEncoding { levels, consecutive_integers };
    let codes = d.iter().map(|&v| enc.code(v).expect("level present")).collect();
    Ok((codes, enc))
}
