use std::io::Write;

use ccacr::dataset::{collapse_instruments, load_csv, BinarizeRule, CsvSpec};
use ccacr::Error;

fn write(contents: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

fn spec(instruments: &[&str], covariates: &[&str]) -> CsvSpec {
    CsvSpec {
        outcome: "y".into(),
        treatment: "d".into(),
        instruments: instruments.iter().map(|s| s.to_string()).collect(),
        covariates: covariates.iter().map(|s| s.to_string()).collect(),
        binarize: vec![],
    }
}

#[test]
fn three_rows_two_instruments_one_covariate() {
    let f = write("y,d,z1,z2,x1\n1.5,0,1,1,0.3\n2,1,0,0,-1\n0.25,2,1,0,4e-1\n");
    let ds = load_csv(f.path(), &spec(&["z1", "z2"], &["x1"])).unwrap();
    assert_eq!((ds.n(), ds.n_instruments(), ds.n_covariates()), (3, 2, 1));
    assert_eq!(ds.y.to_vec(), vec![1.5, 2.0, 0.25]);
    assert_eq!(ds.x[[2, 0]], 0.4);
    assert_eq!(ds.instrument_names, vec!["z1", "z2"]);
}

#[test]
fn columns_can_appear_in_any_order() {
    let f = write("x1,z1,d,y\n7,1,2,3\n8,0,1,4\n");
    let ds = load_csv(f.path(), &spec(&["z1"], &["x1"])).unwrap();
    assert_eq!(ds.d.to_vec(), vec![2.0, 1.0]);
    assert_eq!(ds.x.column(0).to_vec(), vec![7.0, 8.0]);
}

#[test]
fn fractional_instrument_names_column_and_row() {
    let f = write("y,d,z1\n1,0,1\n1,1,0.5\n");
    match load_csv(f.path(), &spec(&["z1"], &[])) {
        Err(Error::NonBinaryInstrument { row, column, value }) => {
            assert_eq!((row, column.as_str(), value), (2, "z1", 0.5));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn header_only_has_no_observations() {
    let f = write("y,d,z1\n");
    assert!(matches!(load_csv(f.path(), &spec(&["z1"], &[])), Err(Error::NoObservations)));
}

#[test]
fn missing_and_malformed_cells() {
    let f = write("y,d,z1\n1,,1\n");
    assert!(matches!(load_csv(f.path(), &spec(&["z1"], &[])), Err(Error::MissingValue { row: 1, .. })));
    let f = write("y,d,z1\n1,NA,1\n");
    assert!(matches!(load_csv(f.path(), &spec(&["z1"], &[])), Err(Error::MissingValue { .. })));
    let f = write("y,d,z1\n1,2,1\nabc,1,0\n");
    match load_csv(f.path(), &spec(&["z1"], &[])) {
        Err(Error::NonNumeric { row, column, value }) => assert_eq!((row, column.as_str(), value.as_str()), (2, "y", "abc")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_file_and_column() {
    assert!(matches!(load_csv("/nonexistent/file.csv", &spec(&["z1"], &[])), Err(Error::Io { .. })));
    let f = write("y,d,z1\n1,2,1\n");
    match load_csv(f.path(), &spec(&["z9"], &[])) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "z9"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn binarized_instrument_drops_interior_rows() {
    let mut text = String::from("y,d,dist\n");
    for v in 1..=100 {
        text.push_str(&format!("{v},{},{v}\n", v % 2));
    }
    let f = write(&text);
    let mut s = spec(&["dist"], &[]);
    s.binarize = vec![BinarizeRule::parse("dist:0.25:0.75").unwrap()];
    let ds = load_csv(f.path(), &s).unwrap();
    // type-7 cut-offs 25.75 and 75.25
    assert_eq!(ds.n(), 25 + 25);
    assert_eq!(ds.binarize_dropped, 50);
    assert!(ds.z.iter().all(|&v| v <= 1));
    let s = collapse_instruments(&ds).unwrap();
    assert_eq!((s.n0, s.n1, s.dropped_mixed), (25, 25, 0));
}

#[test]
fn row_order_is_preserved_through_collapse() {
    let f = write("y,d,z1,z2\n1,0,1,1\n2,0,1,0\n3,1,0,0\n4,1,1,1\n");
    let ds = load_csv(f.path(), &spec(&["z1", "z2"], &[])).unwrap();
    let s = collapse_instruments(&ds).unwrap();
    assert_eq!(s.parent_indices, vec![0, 2, 3]);
    assert_eq!(s.y.to_vec(), vec![1.0, 3.0, 4.0]);
    assert_eq!(s.z_tilde.to_vec(), vec![1.0, 0.0, 1.0]);
    assert_eq!(s.dropped_mixed, 1);
}
