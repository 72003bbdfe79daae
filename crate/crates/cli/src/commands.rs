use ccacr::dataset::{self, BinarizeRule, CollapsedSample, CsvSpec, IvDataset};
use ccacr::dml::{dml_estimate, DmlConfig, NuisanceSpecs};
use ccacr::estimators::{self, cc_acr_wald, margin_weights, tsls_decomposition, tsls_saturated};
use ccacr::learners::causal_forest::CausalForestSpec;
use ccacr::learners::{select_learner, CvReport, LearnerSpec};
use ccacr::limtest::{lim_test, LimTestConfig};
use ccacr::rng::derive_seed;
use ccacr::sim::{builtin_scenario, run_monte_carlo};
use ccacr::types::{type_table, MonotonicityRule};
use ndarray::Array1;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::render::{num, Table};

pub enum Failure {
    /// Bad data or an unmet precondition.
    Data(String),
    /// Flags that parse but do not make sense together.
    Usage(String),
}

impl From<ccacr::Error> for Failure {
    fn from(e: ccacr::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

pub type Outcome = Result<Report, Failure>;

pub struct Report {
    pub config: Value,
    pub result: Value,
    pub text: String,
    pub table: Option<Table>,
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn load(data: &DataArgs) -> Result<IvDataset, Failure> {
    let binarize = data
        .binarize
        .iter()
        .map(|s| BinarizeRule::parse(s).map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = CsvSpec {
        outcome: data.outcome.clone(),
        treatment: data.treatment.clone(),
        instruments: data.instruments.clone(),
        covariates: data.covariates.clone(),
        binarize,
    };
    Ok(dataset::load_csv(&data.input, &spec)?)
}

fn collapsed(data: &DataArgs) -> Result<(IvDataset, CollapsedSample), Failure> {
    let ds = load(data)?;
    let s = dataset::collapse_instruments(&ds)?;
    Ok((ds, s))
}

fn sample_counts(ds: &IvDataset, s: &CollapsedSample) -> Value {
    json!({
        "n_input": ds.n() + ds.binarize_dropped,
        "dropped_binarize": ds.binarize_dropped,
        "dropped_mixed": s.dropped_mixed,
        "n1": s.n1,
        "n0": s.n0,
    })
}

fn config(seed: u64, args: &impl Serialize) -> Value {
    let mut v = to_value(args);
    if let Value::Object(m) = &mut v {
        m.insert("seed".into(), json!(seed));
    }
    v
}

pub fn estimate(a: &EstimateArgs, seed: u64) -> Outcome {
    if a.method == Method::Dml {
        let dml = DmlArgs { data: a.data.clone(), ci: a.ci, dml: a.dml.clone() };
        let mut r = run_dml(&dml, seed)?;
        r.config = config(seed, a);
        return Ok(r);
    }
    let (ds, s) = collapsed(&a.data)?;
    let est = cc_acr_wald(&s, a.ci)?;
    let mut text = format!(
        "beta {}\nse {}\nci {} {}\nnumerator {}\ndenominator {}\nn1 {} n0 {} dropped_mixed {}\n",
        num(est.beta),
        num(est.se),
        num(est.ci_low),
        num(est.ci_high),
        num(est.numerator),
        num(est.denominator),
        est.n1,
        est.n0,
        est.dropped_mixed
    );
    if est.negative_orientation_warning {
        text.push_str("warning: treatment falls when the instruments switch on\n");
    }
    Ok(Report {
        config: config(seed, a),
        result: json!({ "method": "wald", "sample": sample_counts(&ds, &s), "estimate": to_value(&est) }),
        text,
        table: None,
    })
}

pub fn dml(a: &DmlArgs, seed: u64) -> Outcome {
    run_dml(a, seed)
}

#[derive(Serialize)]
struct Selection {
    role: &'static str,
    target: &'static str,
    report: CvReport,
}

#[allow(clippy::too_many_arguments)]
fn choose(
    role: &'static str,
    target: &'static str,
    candidates: &[LearnerSpec],
    fallback: &LearnerSpec,
    s: &CollapsedSample,
    y: &Array1<f64>,
    folds: usize,
    seed: u64,
) -> Result<(LearnerSpec, Option<Selection>), Failure> {
    match candidates {
        [] => Ok((fallback.clone(), None)),
        [only] => Ok((only.clone(), None)),
        many => {
            let (best, report) = select_learner(many, s.x.view(), y.view(), folds.max(2), seed)?;
            Ok((best, Some(Selection { role, target, report })))
        }
    }
}

fn run_dml(a: &DmlArgs, seed: u64) -> Outcome {
    let (ds, s) = collapsed(&a.data)?;
    let o = &a.dml;
    let sel_seed = |k: u64| derive_seed(seed, &[0x5e1ec7, k]);
    let (outcome, sel_y) = choose("outcome", "y", &o.learner_y, &o.learner, &s, &s.y, o.folds, sel_seed(0))?;
    let (treatment, sel_d) = choose("treatment", "d", &o.learner_d, &o.learner, &s, &s.d, o.folds, sel_seed(1))?;
    let (propensity, sel_z) = choose("propensity", "z_tilde", &o.learner_z, &o.learner, &s, &s.z_tilde, o.folds, sel_seed(2))?;
    let selections: Vec<Selection> = [sel_y, sel_d, sel_z].into_iter().flatten().collect();
    let cfg = DmlConfig {
        specs: NuisanceSpecs { outcome, treatment, propensity },
        folds: o.folds,
        splits: o.splits,
        eps: o.trim,
        ci_level: a.ci,
        seed,
    };
    let est = dml_estimate(&s, &cfg)?;

    let mut text = format!(
        "beta {}\nse {}\nci {} {}\nsplits {} folds {} n {}\n",
        num(est.beta),
        num(est.se),
        num(est.ci_low),
        num(est.ci_high),
        o.splits,
        est.folds,
        est.n
    );
    text.push_str("split  beta  se  trimmed\n");
    for (k, sp) in est.splits.iter().enumerate() {
        text.push_str(&format!("{k}  {}  {}  {}\n", num(sp.beta), num(sp.se), sp.trimmed));
    }
    for sel in &selections {
        text.push_str(&format!("cv-rmse ({} ~ x)\n", sel.target));
        for (c, r) in sel.report.candidates.iter().zip(&sel.report.rmse) {
            text.push_str(&format!("  {}  {}\n", c.name(), num(*r)));
        }
    }
    let mut rows = Vec::new();
    for (k, sp) in est.splits.iter().enumerate() {
        for (name, rmse) in &sp.cv_rmse {
            rows.push(vec![k.to_string(), name.clone(), rmse.map_or(String::new(), |v| v.to_string())]);
        }
    }
    Ok(Report {
        config: config(seed, a),
        result: json!({
            "method": "dml",
            "sample": sample_counts(&ds, &s),
            "learners": to_value(&cfg.specs),
            "selection": to_value(&selections),
            "estimate": to_value(&est),
        }),
        text,
        table: Some(Table { header: vec!["split".into(), "nuisance".into(), "cv_rmse".into()], rows }),
    })
}

pub fn decompose(a: &DecomposeArgs, seed: u64) -> Outcome {
    let (ds, s) = collapsed(&a.data)?;
    let dec = tsls_decomposition(&ds)?;
    let saturated = tsls_saturated(&ds)?;
    let (coded, enc) = s.encode_treatment()?;
    let weights = margin_weights(&coded)?;
    let curve = if a.grid.is_empty() { None } else { Some(estimators::weight_curve_continuous(&s, &a.grid)?) };

    let mut text = format!("beta_tsls {}\nweight_sum {}\n", num(dec.beta_tsls), num(dec.weight_sum));
    text.push_str("pair  delta  omega  beta_wald\n");
    for m in 0..dec.omega.len() {
        let pair = format!("{}->{}", dec.support[m].assignments.join("+"), dec.support[m + 1].assignments.join("+"));
        text.push_str(&format!("{pair}  {}  {}  {}\n", num(dec.delta[m]), num(dec.omega[m]), num(dec.beta_wald[m])));
    }
    text.push_str("margin  raw  normalized\n");
    for (k, &m) in weights.margins.iter().enumerate() {
        let norm = weights.normalized.as_ref().map_or("-".to_string(), |w| num(w[k]));
        text.push_str(&format!("{m}  {}  {norm}\n", num(weights.raw[k])));
    }
    text.push_str(&format!("lim_consistent {}\n", weights.lim_consistent));
    if !enc.consecutive_integers {
        text.push_str("warning: treatment levels are not consecutive integers; margins use rank codes\n");
    }
    let rows = (0..dec.omega.len())
        .map(|m| {
            vec![
                dec.support[m].assignments.join("+"),
                dec.support[m + 1].assignments.join("+"),
                dec.delta[m].to_string(),
                dec.omega[m].to_string(),
                dec.beta_wald[m].to_string(),
            ]
        })
        .collect();
    Ok(Report {
        config: config(seed, a),
        result: json!({
            "sample": sample_counts(&ds, &s),
            "decomposition": to_value(&dec),
            "tsls_saturated": saturated,
            "margin_weights": to_value(&weights),
            "encoding": to_value(&enc),
            "weight_curve": to_value(&curve),
        }),
        text,
        table: Some(Table {
            header: ["lower", "upper", "delta", "omega", "beta_wald"].map(String::from).to_vec(),
            rows,
        }),
    })
}

pub fn ks_test(a: &KsArgs, seed: u64) -> Outcome {
    let (ds, s) = collapsed(&a.data)?;
    let t = estimators::ks_dominance_test(&s, a.resamples, seed)?;
    let text = format!(
        "statistic {}\np_value {}\nresamples {}\ncrossings {}\n",
        num(t.statistic),
        num(t.p_value),
        t.resamples,
        t.crossings.len()
    );
    Ok(Report {
        config: config(seed, a),
        result: json!({ "sample": sample_counts(&ds, &s), "test": to_value(&t) }),
        text,
        table: None,
    })
}

fn test_config(o: &TestOptions, seed: u64) -> Result<LimTestConfig, Failure> {
    let mut c = LimTestConfig {
        alpha: o.alpha,
        min_leaf: o.min_leaf,
        eps: o.trim,
        prune: o.prune.into(),
        cv_folds: o.cv_folds,
        seed,
        ..Default::default()
    };
    match &o.learner {
        None => {}
        Some(LearnerSpec::Forest(f)) => {
            c.forest = f.clone();
            c.causal_forest = CausalForestSpec::from(f);
        }
        Some(other) => {
            return Err(Failure::Usage(format!("the test needs a forest learner, got `{}`", other.name())));
        }
    }
    if !(c.alpha > 0.0 && c.alpha < 1.0) {
        return Err(Failure::Usage(format!("alpha must lie in (0, 1), got {}", c.alpha)));
    }
    Ok(c)
}

pub fn lim(a: &LimArgs, seed: u64) -> Outcome {
    let (ds, s) = collapsed(&a.data)?;
    let cfg = test_config(&a.test, seed)?;
    let rep = lim_test(&s, &cfg)?;
    let mut text = format!("n {} min_leaf {} alpha {}\n", rep.n, rep.min_leaf, num(rep.alpha));
    let mut rows = Vec::new();
    for m in &rep.margins {
        let levels = match (m.level_below, m.level_above) {
            (Some(lo), Some(hi)) => format!("{lo}->{hi}"),
            _ => format!("margin {}", m.margin),
        };
        text.push_str(&format!(
            "margin {} ({levels}): reject {} max_t {} threshold {} tests {} first_split {}\n",
            m.margin,
            m.reject,
            m.max_t.map_or("-".into(), num),
            m.threshold.map_or("-".into(), num),
            m.t_vec.len(),
            m.first_split_variable.as_deref().unwrap_or("-")
        ));
        for t in &m.trees {
            text.push_str(&format!("  tree on half {} ({} leaves)\n", t.train_half, t.n_leaves));
            for line in t.rendering.lines() {
                text.push_str(&format!("    {line}\n"));
            }
        }
        rows.push(vec![
            m.margin.to_string(),
            levels,
            m.reject.to_string(),
            m.max_t.map_or(String::new(), |v| v.to_string()),
            m.threshold.map_or(String::new(), |v| v.to_string()),
            m.first_split_variable.clone().unwrap_or_default(),
        ]);
    }
    text.push_str(&format!("overall_reject {}\n", rep.overall_reject));
    Ok(Report {
        config: config(seed, a),
        result: json!({ "sample": sample_counts(&ds, &s), "report": to_value(&rep) }),
        text,
        table: Some(Table {
            header: ["margin", "levels", "reject", "max_t", "threshold", "first_split"].map(String::from).to_vec(),
            rows,
        }),
    })
}

pub fn simulate(a: &SimulateArgs, seed: u64) -> Outcome {
    let mut scenario = builtin_scenario(&a.scenario).map_err(|e| Failure::Usage(e.to_string()))?;
    scenario.seed = seed;
    if let Some(n) = a.n {
        scenario.n = n;
    }
    for o in &a.overrides {
        scenario.apply_override(o).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let cfg = test_config(&a.test, seed)?;
    let mut rep = run_monte_carlo(&scenario, a.reps, &cfg)?;
    if !a.timings {
        rep.runtime_seconds = None;
    }
    let mut text = format!(
        "scenario {}  n {}  reps {}  completed {}\n{:<8}{:<12}{:<12}{:<12}\n",
        rep.scenario.name, rep.scenario.n, rep.reps, rep.completed, "margin", "levels", "rejection", "south_first"
    );
    let mut rows = Vec::new();
    for m in &rep.margins {
        let levels = match (m.level_below, m.level_above) {
            (Some(lo), Some(hi)) => format!("{lo}->{hi}"),
            _ => "-".into(),
        };
        let south = m.first_split_south.map_or("-".into(), num);
        text.push_str(&format!("{:<8}{:<12}{:<12}{:<12}\n", m.margin, levels, num(m.rate), south));
        rows.push(vec![
            m.margin.to_string(),
            levels,
            m.rejections.to_string(),
            m.rate.to_string(),
            m.first_split_south.map_or(String::new(), |v| v.to_string()),
        ]);
    }
    text.push_str(&format!("any margin {}\n", num(rep.any_rejection_rate)));
    if let Some(t) = rep.runtime_seconds {
        text.push_str(&format!("runtime {}s\n", num(t)));
    }
    for f in &rep.failures {
        text.push_str(&format!("failed: {f}\n"));
    }
    Ok(Report {
        config: config(seed, a),
        result: to_value(&rep),
        text,
        table: Some(Table {
            header: ["margin", "levels", "rejections", "rate", "south_first"].map(String::from).to_vec(),
            rows,
        }),
    })
}

pub fn types(a: &TypesArgs, seed: u64) -> Outcome {
    if a.levels < 2 {
        return Err(Failure::Usage("--levels must be >= 2".into()));
    }
    let rules = a
        .rule
        .iter()
        .map(|r| MonotonicityRule::parse(r, a.instruments, a.order.as_deref()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let table = type_table(a.levels - 1, a.instruments, &rules, a.cap)?;
    let counts: Vec<Value> = rules
        .iter()
        .zip(&table.allowed_counts)
        .map(|(r, c)| json!({ "rule": r.label(), "allowed": c }))
        .collect();

    let mut text = String::new();
    if rules.len() == 1 && !a.table {
        text.push_str(&format!("{}\n", table.allowed_counts[0]));
    } else {
        text.push_str(&format!("total {}\n", table.total));
        for (r, c) in rules.iter().zip(&table.allowed_counts) {
            text.push_str(&format!("{} {c}\n", r.label()));
        }
    }
    let mut header: Vec<String> = table.assignments.iter().map(|s| format!("d{s}")).collect();
    header.push("combined".into());
    header.extend(rules.iter().map(|r| r.label()));
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|row| {
            let mut cells: Vec<String> = row.potentials.iter().map(|p| p.to_string()).collect();
            cells.push(row.combined.clone());
            cells.extend(row.allowed.iter().map(|&b| u8::from(b).to_string()));
            cells
        })
        .collect();
    if a.table {
        text.push_str(&header.join(" "));
        text.push('\n');
        for r in &rows {
            text.push_str(&r.join(" "));
            text.push('\n');
        }
    }
    let mut result = json!({
        "levels": a.levels,
        "instruments": a.instruments,
        "total": table.total,
        "counts": counts,
    });
    if a.table {
        result["assignments"] = to_value(&table.assignments);
        result["rows"] = to_value(&table.rows);
    }
    let table = if a.table {
        Table { header, rows }
    } else {
        Table {
            header: vec!["rule".into(), "allowed".into()],
            rows: rules.iter().zip(&table.allowed_counts).map(|(r, c)| vec![r.label(), c.to_string()]).collect(),
        }
    };
    Ok(Report { config: config(seed, a), result, text, table: Some(table) })
}

pub fn binarize(a: &BinarizeArgs, seed: u64) -> Outcome {
    let file = std::fs::File::open(&a.input).map_err(|e| Failure::Data(format!("cannot read {}: {e}", a.input.display())))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| Failure::Data(e.to_string()))?.clone();
    let col = header
        .iter()
        .position(|h| h == a.column)
        .ok_or_else(|| Failure::Data(ccacr::Error::MissingColumn(a.column.clone()).to_string()))?;
    let mut records = Vec::new();
    let mut values = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Failure::Data(e.to_string()))?;
        let raw = rec.get(col).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| {
            Failure::Data(format!("row {}, column `{}`: non-numeric value `{raw}`", r + 1, a.column))
        })?;
        values.push(v);
        records.push(rec);
    }
    if values.is_empty() {
        return Err(ccacr::Error::NoObservations.into());
    }
    let b = dataset::binarize_instrument(&values, a.low, a.high)?;
    let retained = b.retained.iter().filter(|&&r| r).count();
    let coded: Vec<Option<u8>> = b.values.iter().zip(&b.retained).map(|(&v, &r)| r.then_some(v)).collect();
    let text = format!(
        "column {}\nlow_cut {}\nhigh_cut {}\nretained {} of {}\nones {}\n",
        a.column,
        num(b.low_cut),
        num(b.high_cut),
        retained,
        values.len(),
        coded.iter().filter(|v| **v == Some(1)).count()
    );
    let rows = records
        .iter()
        .zip(&coded)
        .filter_map(|(rec, c)| {
            c.map(|v| {
                rec.iter()
                    .enumerate()
                    .map(|(k, cell)| if k == col { v.to_string() } else { cell.to_string() })
                    .collect()
            })
        })
        .collect();
    Ok(Report {
        config: config(seed, a),
        result: json!({
            "column": a.column,
            "low_cut": b.low_cut,
            "high_cut": b.high_cut,
            "n": values.len(),
            "retained": retained,
            "masked": values.len() - retained,
            "values": coded,
        }),
        text,
        table: Some(Table { header: header.iter().map(String::from).collect(), rows }),
    })
}
