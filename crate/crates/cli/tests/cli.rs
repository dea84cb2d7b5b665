use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn extctl(config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_extctl"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

/// Deterministic toy cohort: 40 trial rows then 120 controls, two covariates,
/// outcome `1 + x1 + 0.5 x2 + 0.5 A + noise`.
fn write_cohort(dir: &Path) -> PathBuf {
    let mut text = String::from("id,arm,y,x1,x2\n");
    for i in 0..160 {
        let treated = i < 40;
        let x1 = ((i * 37 % 101) as f64 / 101.0 - 0.5) * 2.0 + if treated { 0.3 } else { 0.0 };
        let x2 = ((i * 53 % 89) as f64 / 89.0 - 0.5) * 2.0;
        let noise = ((i * 71 % 97) as f64 / 97.0 - 0.5) * 0.6;
        let y = 1.0 + x1 + 0.5 * x2 + if treated { 0.5 } else { 0.0 } + noise;
        let x2_cell = if i % 23 == 5 { "NA".to_string() } else { format!("{x2}") };
        text.push_str(&format!("p{i},{},{y},{x1},{x2_cell}\n", u8::from(treated)));
    }
    let path = dir.join("cohort.csv");
    fs::write(&path, text).unwrap();
    path
}

fn estimate_config(methods: Value, outcome: Option<Value>) -> Value {
    let mut pipeline = json!({ "methods": methods });
    if let Some(o) = outcome {
        pipeline["outcome"] = o;
    }
    json!({
        "command": "estimate",
        "seed": 11,
        "estimate": {
            "data": "cohort.csv",
            "schema": { "id": "id", "treatment": "arm", "outcome": "y", "covariates": ["x1", "x2"] },
            "pipeline": pipeline,
            "expected_effect": 0.5
        }
    })
}

fn read_report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn assert_manifest_complete(out: &Path) {
    let report = read_report(out);
    let files = report["manifest"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        let meta = fs::metadata(out.join(f.as_str().unwrap())).unwrap();
        assert!(meta.len() > 0, "{f} is empty");
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn om_only_estimate_writes_one_estimate() {
    let dir = TempDir::new().unwrap();
    write_cohort(dir.path());
    let cfg = write_config(dir.path(), "run.json", &estimate_config(json!(["OM"]), Some(json!({ "kind": "ridge" }))));
    let out = dir.path().join("out");
    let o = extctl(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_report(&out);
    let estimates = report["results"]["estimates"].as_array().unwrap();
    assert_eq!(estimates.len(), 1);
    assert_eq!(estimates[0]["method"], "OM");
    assert!(estimates[0]["tau_hat"].as_f64().unwrap().is_finite());
    assert_eq!(report["run"]["seed"], 11);
    assert_eq!(report["run"]["config_sha256"].as_str().unwrap().len(), 64);
    let table = fs::read_to_string(out.join("bias_table.csv")).unwrap();
    assert!(table.starts_with("method,tau_hat,se,"));
    assert_eq!(table.lines().count(), 2);
    assert_manifest_complete(&out);
}

#[test]
fn aipw_without_outcome_block_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    write_cohort(dir.path());
    let cfg = write_config(dir.path(), "run.json", &estimate_config(json!(["IPW", "AIPW"]), None));
    let o = extctl(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("/estimate/pipeline/outcome") && err.contains("AIPW"), "{err}");
}

#[test]
fn same_config_and_seed_give_identical_reports() {
    let dir = TempDir::new().unwrap();
    write_cohort(dir.path());
    let mut cfg = estimate_config(json!(["PSM", "IPW", "OM", "AIPW"]), Some(json!({ "kind": "ridge" })));
    cfg["estimate"]["inference"] = json!({ "bootstrap": { "replicates": 100, "methods": ["AIPW"] } });
    let path = write_config(dir.path(), "run.json", &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = extctl(&path, out, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join("bias_table.csv")).unwrap(), fs::read(b.join("bias_table.csv")).unwrap());
    let report = read_report(&a);
    assert_eq!(report["results"]["estimates"].as_array().unwrap().len(), 4);
    assert!(report["results"]["estimates"][3]["diagnostics"]["bootstrap"]["variance"].as_f64().unwrap() > 0.0);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = TempDir::new().unwrap();
    write_cohort(dir.path());
    let cfg = write_config(dir.path(), "run.json", &estimate_config(json!(["OM"]), Some(json!({ "kind": "ridge" }))));
    let out = dir.path().join("out");
    let o = extctl(&cfg, &out, &["--seed", "99", "--threads", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_report(&out)["run"]["seed"], 99);
}

#[test]
fn unknown_keys_are_listed() {
    let dir = TempDir::new().unwrap();
    let mut cfg = estimate_config(json!(["OM"]), Some(json!({ "kind": "ridge" })));
    cfg["verbose"] = json!(true);
    cfg["estimate"]["schema"]["weights"] = json!("w");
    let path = write_config(dir.path(), "run.json", &cfg);
    let o = extctl(&path, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("/verbose") && err.contains("/estimate/schema/weights"), "{err}");
}

fn design_config(body: Value) -> Value {
    json!({ "command": "design", "design": body })
}

#[test]
fn design_tables_hit_known_limits() {
    let dir = TempDir::new().unwrap();
    let cfg = design_config(json!({ "alpha": 0.05, "tau": 0.3, "kappa_sq": 1.0, "n1": 150, "n0": 1e6, "gamma": 1.0 }));
    let path = write_config(dir.path(), "design.json", &cfg);
    let out = dir.path().join("out");
    let o = extctl(&path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_manifest_complete(&out);

    let mut power = csv::Reader::from_path(out.join("power.csv")).unwrap();
    let first = power.records().next().unwrap().unwrap();
    assert_eq!(first[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(first[2].parse::<f64>().unwrap(), 0.05);

    let mut ratios = csv::Reader::from_path(out.join("ratio_grid.csv")).unwrap();
    let at_limit: Vec<f64> = ratios
        .records()
        .map(|r| r.unwrap())
        .filter(|r| r[0].parse::<f64>().unwrap() == 1.0 && r[1].parse::<f64>().unwrap() >= 1e6)
        .map(|r| r[2].parse().unwrap())
        .collect();
    assert!(!at_limit.is_empty());
    for r in at_limit {
        assert!((r - 0.25).abs() < 1e-6, "{r}");
    }
    assert_eq!(read_report(&out)["results"]["gamma"]["method"], "supplied");
}

#[test]
fn design_gamma_from_smd_inputs() {
    let dir = TempDir::new().unwrap();
    let cfg = design_config(
        json!({ "tau": 0.3, "kappa_sq": 1.0, "n1": 150, "n0": 600, "gamma_inputs": { "smds": [0.25, 0.25] } }),
    );
    let path = write_config(dir.path(), "design.json", &cfg);
    let out = dir.path().join("out");
    let o = extctl(&path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gamma = &read_report(&out)["results"]["gamma"];
    assert_eq!(gamma["method"], "gaussian-smd");
    assert!((gamma["value"].as_f64().unwrap() - (-0.125f64).exp()).abs() < 1e-12);
}

#[test]
fn design_without_gamma_suggests_smd_inputs() {
    let dir = TempDir::new().unwrap();
    let cfg = design_config(json!({ "tau": 0.3, "kappa_sq": 1.0, "n1": 150, "n0": 600 }));
    let path = write_config(dir.path(), "design.json", &cfg);
    let o = extctl(&path, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma_inputs"), "{}", stderr(&o));
}

#[test]
fn infeasible_design_has_its_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let cfg =
        design_config(json!({ "tau": 0.1, "kappa_sq": 1.0, "n1": 100, "n0": 20, "gamma": 0.2, "target_power": [0.9] }));
    let path = write_config(dir.path(), "design.json", &cfg);
    let out = dir.path().join("out");
    let o = extctl(&path, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let report = read_report(&out);
    assert_eq!(report["results"]["feasible"], false);
    assert_manifest_complete(&out);
}

fn small_dgp() -> Value {
    json!({
        "d": 2,
        "mean_shift": [0.3, 0.0],
        "outcome_coef": [1.0, 0.5],
        "tau": 0.5,
        "assignment": { "kind": "two_population", "n1": 60, "n0": 180 }
    })
}

#[test]
fn simulate_smoke_run_writes_declared_files() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "command": "simulate",
        "seed": 5,
        "simulate": { "dgp": small_dgp(), "mc": { "pipeline": { "methods": ["OM"], "outcome": { "kind": "ridge" } }, "reps": 100 } }
    });
    let path = write_config(dir.path(), "sim.json", &cfg);
    let out = dir.path().join("out");
    let o = extctl(&path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_manifest_complete(&out);
    let report = read_report(&out);
    assert_eq!(report["manifest"], json!(["mc_results.csv", "report.json"]));
    assert_eq!(report["results"]["results"][0]["reps"], 100);
}

#[test]
fn sweep_at_beta_zero_gives_unit_psm_ratio() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "command": "sweep",
        "seed": 3,
        "sweep": { "dgp": small_dgp(), "sweep": { "pipeline": { "methods": ["PSM"] }, "beta_grid": [0.0], "resamples": 3 } }
    });
    let path = write_config(dir.path(), "sweep.json", &cfg);
    let out = dir.path().join("out");
    let o = extctl(&path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("sweep_table.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let col = headers.iter().position(|h| h == "mean_variance_ratio").unwrap();
    assert_eq!(rows[0][col].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn run_seed_must_not_be_duplicated_inside_the_dgp() {
    let dir = TempDir::new().unwrap();
    let mut dgp = small_dgp();
    dgp["seed"] = json!(4);
    let cfg = json!({
        "command": "sweep",
        "sweep": { "dgp": dgp, "sweep": { "pipeline": { "methods": ["PSM"] }, "beta_grid": [0.0] } }
    });
    let path = write_config(dir.path(), "sweep.json", &cfg);
    let o = extctl(&path, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/sweep/dgp/seed"));
}

#[test]
fn missing_data_file_is_a_runtime_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.json", &estimate_config(json!(["OM"]), Some(json!({ "kind": "ridge" }))));
    let o = extctl(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
}
