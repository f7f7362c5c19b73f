use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CANONICAL: &str = r#"{
  "dynamics": { "b1": 0.1, "b2": 1.0, "sigma0": 0.3, "tsigma0": 0.2 },
  "costs": { "kind": "lq", "q": 1, "qbar": 0.5, "s": 0.8, "qT": 1, "qbarT": 0.5, "sT": 0.8 },
  "horizon": { "T": 1.0 },
  "lipschitz": { "K": 10.0 },
  "initial": { "kind": "gaussian", "mean": 1.0, "variance": 0.25 }
}"#;

fn mfgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgcn"))
        .args(args)
        .env_remove("MFGCN_SEED")
        .output()
        .expect("binary runs")
}

fn write_model(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn riccati_trivial_model_is_constant_one() {
    // q = qT = 1, no mean-field term, no drift: P' = P^2 - 1 with P(T) = 1
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(
        dir.path(),
        "trivial.json",
        r#"{
          "dynamics": { "b1": 0.0, "b2": 1.0, "sigma0": 0.3 },
          "costs": { "kind": "lq", "q": 1, "qbar": 0, "s": 0, "qT": 1, "qbarT": 0, "sT": 0 },
          "horizon": { "T": 1.0 }
        }"#,
    );
    let out = dir.path().join("ric.csv");
    let o = mfgcn(&["riccati", "--model", s(&model), "--grid", "1,20", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,P,R"));
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 21);
    for r in &rows {
        assert!((r[1] - 1.0).abs() < 1e-12, "P = {}", r[1]);
        assert!(r[2].abs() < 1e-12, "R = {}", r[2]);
    }
    assert!(text.lines().last().unwrap().starts_with("# seed="));
}

#[test]
fn missing_model_names_the_path() {
    let o = mfgcn(&["riccati", "--model", "/no/such/model.json", "--grid", "1,10", "--out", "/tmp/x.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/model.json"));
}

#[test]
fn violated_constraint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(
        dir.path(),
        "bad.json",
        &CANONICAL.replace("\"q\": 1,", "\"q\": -1,"),
    );
    let o = mfgcn(&["riccati", "--model", s(&model), "--grid", "1,10", "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(mfgcn(&["riccati", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(mfgcn(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_initial_law_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = CANONICAL.replace(
        ",\n  \"initial\": { \"kind\": \"gaussian\", \"mean\": 1.0, \"variance\": 0.25 }",
        "",
    );
    let model = write_model(dir.path(), "noinit.json", &text);
    let out = dir.path().join("run");
    let o = mfgcn(&["solve-mfg", "--model", s(&model), "--grid", "1,10", "--particles", "2,16", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("initial"));
}

#[test]
fn solve_mfg_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "m.json", CANONICAL);
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = mfgcn(&[
            "solve-mfg", "--model", s(&model), "--grid", "1,10", "--particles", "4,64", "--threads", threads,
            "--out", s(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "2");
    for f in ["policy.csv", "flow.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_secs");
        v
    };
    assert_eq!(report(&a), report(&b));
    let flow = fs::read_to_string(a.join("flow.csv")).unwrap();
    assert!(flow.starts_with("kappa,step,mean,second_moment,w2_to_initial"));
    // 4 paths, 11 steps, header and footer
    assert_eq!(flow.lines().count(), 4 * 11 + 2);
}

#[test]
fn compare_picard_against_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "m.json", CANONICAL);
    let out = dir.path().join("cmp.json");
    let o = mfgcn(&[
        "compare", "--model", s(&model), "--grid", "1,20", "--particles", "4,128", "--a", "picard", "--b", "oracle",
        "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let rel = v["relative"].as_f64().unwrap();
    assert!(rel < 0.05, "relative gap {rel}");
    assert_eq!(v["a"], "picard");
}

#[test]
fn check_assumptions_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path(), "m.json", CANONICAL);
    let out = dir.path().join("audit.json");
    let o = mfgcn(&["check-assumptions", "--model", s(&model), "--trials", "20", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v.as_array().is_some_and(|a| !a.is_empty()));
}
