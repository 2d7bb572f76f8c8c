//! End-to-end tests of the `sqrec` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sqrec"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn sqrec");
    assert!(
        out.status.success(),
        "sqrec {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn parse_doc(stdout: &[u8]) -> serde_json::Value {
    serde_json::from_slice(stdout).expect("valid JSON document")
}

#[test]
fn fit_unit_sphere_fixture() {
    let input = fixture("unit_sphere.xyz");
    let out = run_ok(&["fit", input.to_str().unwrap()]);
    let doc = parse_doc(&out.stdout);
    let sq = &doc["superquadric"];
    for key in ["eps1", "eps2"] {
        let v = sq[key].as_f64().unwrap();
        assert!((0.9..=1.1).contains(&v), "{key} = {v}");
    }
    for key in ["ax", "ay", "az"] {
        let v = sq[key].as_f64().unwrap();
        assert!((0.95..=1.05).contains(&v), "{key} = {v}");
    }
}

#[test]
fn fit_is_deterministic_under_seed() {
    let input = fixture("unit_sphere.xyz");
    let a = run_ok(&["fit", input.to_str().unwrap(), "--seed", "7"]);
    let b = run_ok(&["fit", input.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(a.stdout, b.stdout, "same seed must give byte-identical output");
}

#[test]
fn fit_w_o_zero_matches_default_on_clean_data() {
    let input = fixture("unit_sphere.xyz");
    let a = parse_doc(&run_ok(&["fit", input.to_str().unwrap()]).stdout);
    let b = parse_doc(&run_ok(&["fit", input.to_str().unwrap(), "--w-o", "0"]).stdout);
    for key in ["eps1", "eps2", "ax", "ay", "az"] {
        let va = a["superquadric"][key].as_f64().unwrap();
        let vb = b["superquadric"][key].as_f64().unwrap();
        assert!((va - vb).abs() < 1e-3, "{key}: {va} vs {vb}");
    }
}

#[test]
fn sample_then_refit_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let doc_path = dir.path().join("fit.json");
    let cloud_path = dir.path().join("resampled.xyz");
    let input = fixture("unit_sphere.xyz");
    run_ok(&["fit", input.to_str().unwrap(), "--out", doc_path.to_str().unwrap()]);
    run_ok(&[
        "sample",
        doc_path.to_str().unwrap(),
        "--spacing",
        "0.1",
        "--out",
        cloud_path.to_str().unwrap(),
    ]);
    let refit = parse_doc(&run_ok(&["fit", cloud_path.to_str().unwrap()]).stdout);
    for key in ["ax", "ay", "az"] {
        let v = refit["superquadric"][key].as_f64().unwrap();
        assert!((0.95..=1.05).contains(&v), "{key} = {v}");
    }
}

#[test]
fn sample_ply_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ply = dir.path().join("sphere.ply");
    run_ok(&["sample", "--spacing", "0.15", "--out", ply.to_str().unwrap(), "--format", "ply"]);
    let doc = parse_doc(&run_ok(&["fit", ply.to_str().unwrap()]).stdout);
    let v = doc["superquadric"]["ax"].as_f64().unwrap();
    assert!((0.95..=1.05).contains(&v));
}

#[test]
fn missing_file_exit_code() {
    let out = bin().args(["fit", "/nonexistent/cloud.xyz"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn parse_error_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.xyz");
    std::fs::write(&bad, "1 2 3\nnot numbers here\n").unwrap();
    let out = bin().args(["fit", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn insufficient_points_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = dir.path().join("tiny.xyz");
    std::fs::write(&tiny, "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    let out = bin().args(["fit", tiny.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn usage_error_exit_code() {
    let out = bin().args(["fit"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_row_count() {
    let out = run_ok(&["bench", "partial", "1.0,0.6", "--instances", "2"]);
    let report: serde_json::Value = parse_doc(&out.stdout);
    let records = report["records"].as_array().unwrap();
    assert_eq!(records.len(), 2 * 2 * 2, "levels x instances x methods");
}

#[test]
fn synth_is_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        run_ok(&[
            "synth",
            "--count",
            "2",
            "--seed",
            "1",
            "--out",
            d.path().to_str().unwrap(),
        ]);
    }
    for name in ["cloud_000.xyz", "cloud_001.xyz", "truth_000.json", "truth_001.json"] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
}

#[test]
fn fit_multi_on_single_primitive() {
    let input = fixture("unit_sphere.xyz");
    let doc = parse_doc(&run_ok(&["fit-multi", input.to_str().unwrap()]).stdout);
    let hierarchy = &doc["hierarchy"];
    assert_eq!(hierarchy["nodes"].as_array().unwrap().len(), 1);
    assert!(hierarchy["edges"].as_array().unwrap().is_empty());
    let labels = hierarchy["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 1245);
    assert!(labels.iter().all(|l| l.as_u64() == Some(0)));
}

#[test]
fn fit_multi_max_layers_one() {
    let input = fixture("unit_sphere.xyz");
    let doc = parse_doc(
        &run_ok(&["fit-multi", input.to_str().unwrap(), "--max-layers", "1"]).stdout,
    );
    assert_eq!(doc["hierarchy"]["nodes"].as_array().unwrap().len(), 1);
}

#[test]
fn sq_threads_env_is_accepted() {
    let input = fixture("unit_sphere.xyz");
    let out = bin()
        .env("SQ_THREADS", "1")
        .args(["fit", input.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
}
