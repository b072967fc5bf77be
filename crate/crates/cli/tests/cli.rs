use std::fs;
use std::process::{Command, Output};

fn ifkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifkit")).args(args).output().expect("run ifkit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn derive_prints_the_influence_function() {
    let o = ifkit(&["derive", "--schema", r#"{"x":2,"a":2,"y":2}"#, "--expr", "sum_x { E[y | x=x, a=1] * p(x=x) }"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("phi"));
}

#[test]
fn derive_rejects_unknown_variables() {
    let o = ifkit(&["derive", "--schema", r#"{"x":2}"#, "--expr", "E[w]"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_passes_on_a_valid_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    let doc = r#"{"schema": [["x", 2], ["y", 2]],
                  "masses": [[[0,0], 0.1], [[0,1], 0.2], [[1,0], 0.3], [[1,1], 0.4]]}"#;
    fs::write(&path, doc).unwrap();
    let o = ifkit(&["check", "--expr", "E[y | x=1]", "--dist", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn check_rejects_masses_that_do_not_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    let doc = r#"{"schema": [["x", 2]], "masses": [[[0], 0.3], [[1], 0.3]]}"#;
    fs::write(&path, doc).unwrap();
    let o = ifkit(&["check", "--expr", "E[x]", "--dist", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(ifkit(&["estimate", "--bogus"]).status.code(), Some(2));
}

#[test]
fn list_names_the_catalog() {
    let o = ifkit(&["list"]);
    assert!(o.status.success());
    for id in ["mean_treated", "late_ratio", "expected_density"] {
        assert!(stdout(&o).contains(id), "{id}");
    }
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    fs::write(
        &cfg,
        r#"{"dgp": "ate-smooth-1d", "functional": "mean_treated", "n": [100], "replications": 3, "seed": 2,
            "learners": {"default": "knn(k=10)"}}"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = ifkit(&["--quiet", "simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn estimate_reads_csv_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let mut text = String::from("x1,a,y\n");
    for i in 0..200 {
        let x = (i as f64 * 0.618).fract();
        let a = (i % 3 != 0) as u8;
        text.push_str(&format!("{x},{a},{}\n", x + 0.1 * a as f64));
    }
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("e.json");
    let o = ifkit(&[
        "estimate", "--functional", "mean_treated", "--data", csv.to_str().unwrap(),
        "--learner-default", "knn(k=10)", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["n"], 200);
    assert_eq!(v["K"], 5);
    let psi = v["psi_hat"].as_f64().unwrap();
    assert!(psi > 0.3 && psi < 0.9, "{psi}");
}
