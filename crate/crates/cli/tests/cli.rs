use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn shipped(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

struct Run {
    out: PathBuf,
    res: Output,
}

impl Run {
    fn code(&self) -> i32 {
        self.res.status.code().unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.out.join(name)).unwrap()).unwrap()
    }

    fn text(&self, name: &str) -> String {
        std::fs::read_to_string(self.out.join(name)).unwrap()
    }
}

fn run(dir: &Path, cmd: &str, config: &Value, extra: &[&str]) -> Run {
    let cfg = dir.join(format!("{cmd}.json"));
    std::fs::write(&cfg, config.to_string()).unwrap();
    let out = dir.join("out");
    let res = Command::new(env!("CARGO_BIN_EXE_vicl"))
        .args([cmd, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    Run { out, res }
}

#[test]
fn misspelled_field_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = shipped("embed_identity.json");
    let grid = cfg["grid"].as_object_mut().unwrap();
    let v = grid.remove("points_per_axis").unwrap();
    grid.insert("points_per_axes".into(), v);
    let r = run(dir.path(), "embed", &cfg, &[]);
    assert_eq!(r.code(), 2);
    let err = r.json("error.json");
    assert_eq!(err["error"], "config");
    assert_eq!(err["field"], "grid.points_per_axes");
    let stderr: Value = serde_json::from_slice(&r.res.stderr).unwrap();
    assert_eq!(stderr, err);
}

#[test]
fn missing_and_mistyped_fields_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = shipped("construct_sin.json");
    cfg.as_object_mut().unwrap().remove("epsilon");
    let r = run(dir.path(), "construct", &cfg, &[]);
    assert_eq!(r.code(), 2);
    assert_eq!(r.json("error.json")["field"], "epsilon");

    let mut cfg = shipped("kronecker.json");
    cfg["epsilon"] = json!("small");
    let r = run(dir.path(), "kronecker", &cfg, &[]);
    assert_eq!(r.code(), 2);
    assert_eq!(r.json("error.json")["field"], "epsilon");
}

#[test]
fn bad_expression_points_at_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = shipped("construct_sin.json");
    cfg["target"] = json!("sin(2*pi*x");
    let r = run(dir.path(), "construct", &cfg, &[]);
    assert_eq!(r.code(), 2);
    let err = r.json("error.json");
    assert_eq!(err["field"], "target[0]");
    assert!(err["message"].as_str().unwrap().contains("offset"));
}

#[test]
fn position_cap_exits_3_with_evidence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = shipped("construct_sin.json");
    cfg["j_cap"] = json!(1000);
    let r = run(dir.path(), "construct", &cfg, &[]);
    assert_eq!(r.code(), 3);
    let err = r.json("error.json");
    assert_eq!(err["error"], "scan_exhausted");
    let d = err["evidence"]["best_distance"].as_f64().unwrap();
    assert!(d.is_finite() && d > 0.0);
}

#[test]
fn kronecker_cap_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"betas": [0.3], "epsilon": 1e-9, "q_cap": 10});
    let r = run(dir.path(), "kronecker", &cfg, &[]);
    assert_eq!(r.code(), 3);
    assert_eq!(r.json("error.json")["error"], "kronecker_cap");
}

#[test]
fn zero_target_needs_no_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = shipped("construct_sin.json");
    cfg["target"] = json!("0");
    let r = run(dir.path(), "construct", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", String::from_utf8_lossy(&r.res.stderr));
    let rep = &r.json("report.json")["result"];
    assert_eq!(rep["n"], 0);
    assert_eq!(rep["achieved_sup_error"], 0.0);
    let tokens = r.text("tokens.csv");
    assert_eq!(tokens.lines().count(), 2, "{tokens}");
}

#[test]
fn identity_embedding_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(dir.path(), "embed", &shipped("embed_identity.json"), &[]);
    assert_eq!(r.code(), 0);
    let res = &r.json("embedding.json")["result"];
    assert_eq!(res["embedding"]["certified_sup_error"], 0.0);
    assert!(res["max_gap"].as_f64().unwrap() <= 1e-12);
    let gap = r.text("gap.csv");
    assert_eq!(gap.lines().nth(1).unwrap(), "x_1,x_2,fnn_1,readout_1,gap");
    assert_eq!(gap.lines().count(), 2 + 21 * 21);
}

#[test]
fn dyadic_radius_matches_the_staircase() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(dir.path(), "density", &shipped("density_dyadic.json"), &[]);
    assert_eq!(r.code(), 0);
    let res = &r.json("density.json")["result"];
    assert_eq!(res["closed_form_max_deviation"], 0.0);
    assert_eq!(res["final_radius"], 2f64.powi(-8));
}

#[test]
fn seed_override_changes_hash_and_draws() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = shipped("kronecker.json");
    let hash = |r: &Run| r.json("kronecker.json")["meta"]["config_sha256"].as_str().unwrap().to_string();
    let a = run(dir.path(), "kronecker", &cfg, &[]);
    let (ha, ca) = (hash(&a), a.text("kronecker.csv"));
    let b = run(dir.path(), "kronecker", &cfg, &["--seed", "9"]);
    let (hb, cb) = (hash(&b), b.text("kronecker.csv"));
    assert_ne!(ha, hb);
    assert_ne!(ca.lines().nth(2), cb.lines().nth(2));
    assert!(cb.starts_with(&format!("# vicl {} kronecker config_sha256={hb}\n", env!("CARGO_PKG_VERSION"))));
    let mut same = cfg.clone();
    same["seed"] = json!(9);
    let c = run(dir.path(), "kronecker", &same, &[]);
    assert_eq!(hash(&c), hb);
}

#[test]
fn threads_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(dir.path(), "kronecker", &shipped("kronecker.json"), &["--threads", "0"]);
    assert_eq!(r.code(), 2);
    assert_eq!(r.json("error.json")["field"], "--threads");
}
