use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_survmix");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn survmix")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "survmix {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn spec_json(n: usize, seed: u64) -> String {
    format!(
        r#"{{
  "n": {n},
  "seed": {seed},
  "weights": [0.5, 0.5],
  "clusters": [
    {{"center": [-2.0, 0.0], "spread": 1.0, "time": {{"kind": "exponential", "rate": 0.2}}}},
    {{"center": [2.0, 0.0], "spread": 1.0, "time": {{"kind": "exponential", "rate": 2.0}}}}
  ],
  "censoring": {{"kind": "exponential", "rate": 0.15}}
}}"#
    )
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let f = Self { dir };
        fs::write(f.path("spec.json"), spec_json(n, 11)).unwrap();
        ok(&[
            "synth",
            "--spec",
            f.s("spec.json"),
            "--out",
            f.s("data.csv"),
            "--schema",
            f.s("schema.json"),
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> &str {
        // Leaked so call sites can build &str slices inline; tests are short-lived.
        Box::leak(self.path(name).to_string_lossy().into_owned().into_boxed_str())
    }

    fn fit(&self, out: &str, extra: &[&str]) {
        let mut args = vec![
            "fit",
            "--data",
            self.s("data.csv"),
            "--schema",
            self.s("schema.json"),
            "--out",
            self.s(out),
            "--restarts",
            "2",
        ];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn synth_writes_truth_column_and_is_deterministic() {
    let f = Fixture::new(200);
    let (header, rows) = read_rows(&f.path("data.csv"));
    assert_eq!(header, ["time", "event", "x1", "x2", "truth"]);
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().all(|r| r[4] == "1" || r[4] == "2"));
    ok(&["synth", "--spec", f.s("spec.json"), "--out", f.s("again.csv")]);
    assert_eq!(
        fs::read(f.path("data.csv")).unwrap(),
        fs::read(f.path("again.csv")).unwrap()
    );
}

#[test]
fn synth_rejects_bad_weights() {
    let dir = TempDir::new().unwrap();
    let spec = spec_json(10, 1).replace("[0.5, 0.5]", "[0.7, 0.7]");
    let p = dir.path().join("spec.json");
    fs::write(&p, spec).unwrap();
    let out = run(&["synth", "--spec", p.to_str().unwrap(), "--out", dir.path().join("o.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["fit"]).status.code(), Some(2));
    assert_eq!(run(&["nonsense"]).status.code(), Some(2));
    assert_eq!(run(&["fit", "--k-grid", "5..2", "--data", "a", "--schema", "b", "--out", "c"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_1() {
    let out = run(&["fit", "--data", "/nonexistent.csv", "--schema", "/nonexistent.json", "--out", "/tmp/x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn split_partitions_rows() {
    let f = Fixture::new(200);
    ok(&["split", "--data", f.s("data.csv"), "--schema", f.s("schema.json"), "--out", f.s("parts")]);
    let total: usize = ["train", "validation", "test"]
        .iter()
        .map(|p| read_rows(&f.path(&format!("parts/{p}.csv"))).1.len())
        .sum();
    assert_eq!(total, 200);
    assert_eq!(read_rows(&f.path("parts/train.csv")).1.len(), 120);
}

#[test]
fn fit_predict_evaluate_roundtrip() {
    let f = Fixture::new(300);
    f.fit("model.json", &["--k", "3"]);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(f.path("model.json")).unwrap()).unwrap();
    assert_eq!(doc["model"]["kind"], "survmixclust");
    assert_eq!(doc["model"]["params"]["k"], 3);
    let (dh, drows) = read_rows(&f.path("model.diagnostics.csv"));
    assert_eq!(dh, ["iteration", "churn", "log_likelihood"]);
    assert_eq!(drows[0][0], "0");

    ok(&[
        "predict",
        "--model",
        f.s("model.json"),
        "--data",
        f.s("data.csv"),
        "--out",
        f.s("pred.csv"),
        "--grid-points",
        "25",
    ]);
    let (header, rows) = read_rows(&f.path("pred.csv"));
    assert_eq!(header.len(), 3 + 25);
    assert_eq!(header[3], "t=0");
    assert_eq!(rows.len(), 300);
    for r in &rows {
        let c: usize = r[1].parse().unwrap();
        assert!((1..=3).contains(&c));
        let u: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&u));
        let s: Vec<f64> = r[3..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(s[0], 1.0);
        assert!(s.windows(2).all(|w| w[1] <= w[0]));
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    ok(&["evaluate", "--model", f.s("model.json"), "--data", f.s("data.csv"), "--out", f.s("eval.json")]);
    let e: serde_json::Value = serde_json::from_slice(&fs::read(f.path("eval.json")).unwrap()).unwrap();
    assert!(e["c_index"].as_f64().unwrap() >= 0.7);
    let sizes: u64 = e["cluster_sizes"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(sizes, 300);
}

#[test]
fn kmeans_baseline_and_single_cluster_note() {
    let f = Fixture::new(200);
    f.fit("km.json", &["--baseline", "kmeans", "--k", "1"]);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(f.path("km.json")).unwrap()).unwrap();
    assert_eq!(doc["model"]["kind"], "kmeans_survival");
    assert!(!f.path("km.diagnostics.csv").exists());
    ok(&["evaluate", "--model", f.s("km.json"), "--data", f.s("data.csv"), "--out", f.s("eval.json")]);
    let e: serde_json::Value = serde_json::from_slice(&fs::read(f.path("eval.json")).unwrap()).unwrap();
    assert!(e["logrank"].is_null());
    assert!(e["logrank_note"].is_string());
    assert_eq!(e["cluster_sizes"], serde_json::json!([200]));
}

#[test]
fn k_grid_writes_cv_report() {
    let f = Fixture::new(200);
    f.fit("sel.json", &["--k-grid", "2..3"]);
    let (header, rows) = read_rows(&f.path("sel.cv.csv"));
    assert_eq!(header, ["k", "fold", "c_index"]);
    assert_eq!(rows.len(), 6);
}
