use serde_json::{json, Value};

use crate::commands::Report;

/// Fixed six-decimal rendering for text reports; very large or very small
/// magnitudes switch to scientific notation with six significant digits.
pub fn num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let a = x.abs();
    if a == 0.0 || (1e-4..1e9).contains(&a) {
        format!("{x:.6}")
    } else {
        format!("{x:.5e}")
    }
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub const SCHEMA_VERSION: &str = "1";

pub fn envelope(command: &str, report: &Report) -> Value {
    json!({
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "ccacr_version": env!("CARGO_PKG_VERSION"),
        "config": report.config,
        "result": report.result,
    })
}

pub fn json(command: &str, report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(&envelope(command, report)).expect("json values serialize");
    s.push('\n');
    s
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<Vec<String>>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        Value::Null => out.push(vec![prefix.to_string(), String::new()]),
        Value::String(s) => out.push(vec![prefix.to_string(), s.clone()]),
        other => out.push(vec![prefix.to_string(), other.to_string()]),
    }
}

/// The command's natural table when it has one, otherwise the result
/// flattened into `key,value` rows.
pub fn csv(report: &Report) -> String {
    let table = match &report.table {
        Some(t) => Table { header: t.header.clone(), rows: t.rows.clone() },
        None => {
            let mut rows = Vec::new();
            flatten("", &report.result, &mut rows);
            Table { header: vec!["key".into(), "value".into()], rows }
        }
    };
    let mut w = ::csv::Writer::from_writer(Vec::new());
    w.write_record(&table.header).expect("in-memory write");
    for r in &table.rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}
