use ccacr::types::{classify, enumerate_types, Assignment, MonotonicityRule, ResponseType, DEFAULT_TYPE_CAP};

#[derive(Debug, serde::Deserialize)]
struct Row {
    d00: u8,
    d01: u8,
    d10: u8,
    d11: u8,
    lim: u8,
    pm: u8,
    iam: u8,
}

fn golden() -> Vec<Row> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/response_types_j2_k2.csv");
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn every_row_matches_checkmarks() {
    let rows = golden();
    assert_eq!(rows.len(), 81);
    let lim = MonotonicityRule::Lim;
    let pm = MonotonicityRule::pm(vec![1, 1]).unwrap();
    let iam = MonotonicityRule::iam(Assignment::all(2), 2).unwrap();
    for r in &rows {
        let t = ResponseType::new(2, vec![r.d00, r.d01, r.d10, r.d11]).unwrap();
        let label = format!("{:?}", t.potentials);
        assert_eq!(classify(&t, &lim), r.lim == 1, "lim {label}");
        assert_eq!(classify(&t, &pm), r.pm == 1, "pm {label}");
        assert_eq!(classify(&t, &iam), r.iam == 1, "iam {label}");
    }
}

#[test]
fn golden_covers_every_enumerated_type_once() {
    let mut listed: Vec<Vec<u8>> = golden().iter().map(|r| vec![r.d00, r.d01, r.d10, r.d11]).collect();
    listed.sort();
    let all: Vec<Vec<u8>> = enumerate_types(2, 2, DEFAULT_TYPE_CAP).unwrap().into_iter().map(|t| t.potentials).collect();
    assert_eq!(listed, all);
}
