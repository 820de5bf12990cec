use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn debias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(args)
        .env_remove("DEBIAS_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_str(&stdout(out)).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

/// Deterministic table with `d` covariates, every third outcome missing.
fn table(n: usize, d: usize) -> String {
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let mut text = String::from("Y,R");
    for k in 1..=d {
        text.push_str(&format!(",X{k}"));
    }
    text.push('\n');
    for i in 0..n {
        let x: Vec<f64> = (0..d).map(|_| next()).collect();
        let noise = 0.3 * next();
        let observed = i % 3 != 2;
        if observed {
            text.push_str(&format!("{}", 2.0 * x[0] - x[1] + noise));
        }
        text.push_str(if observed { ",1" } else { ",0" });
        for v in x {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    text
}

const TOY: &str = "Y,R,X1,X2
1.2,1,1.0,0.5
-0.7,1,-0.3,1.1
0.4,1,0.8,-0.9
2.1,1,1.5,0.2
-1.3,1,-1.1,-0.4
0.0,1,0.1,0.7
";

#[test]
fn zero_weight_regime_returns_the_pilot_value() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", TOY);
    // gamma / n >= |x|_inf = 1 puts the dual solution at zero.
    let report = json(&debias(&["fit", "--data", &data, "--x", "1,-0.5", "--gamma", "6"]));
    let out = &report["output"];
    let beta: Vec<f64> = serde_json::from_value(out["pilot"]["beta_hat"].clone()).unwrap();
    let weights: Vec<f64> = serde_json::from_value(out["solution"]["weights"].clone()).unwrap();
    assert!(weights.iter().all(|&w| w == 0.0));
    let plug_in = beta[0] - 0.5 * beta[1];
    assert_eq!(out["result"]["m_hat"].as_f64().unwrap(), plug_in);
    assert_eq!(out["result"]["variance_hat"].as_f64().unwrap(), 0.0);
    assert_eq!(report["seed"].as_u64().unwrap(), 0);
}

#[test]
fn observed_row_without_outcome_is_rejected_with_its_line() {
    let dir = TempDir::new().unwrap();
    let bad = TOY.replace("0.4,1,0.8,-0.9", ",1,0.8,-0.9");
    let data = write(dir.path(), "bad.csv", &bad);
    let out = debias(&["fit", "--data", &data, "--x", "1,0"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4") && err.contains("R = 1"), "{err}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "data.csv", &table(60, 8));
    let run = |threads: &str| {
        debias(&["fit", "--data", &data, "--x", "1,0,0.5,0,0,0,0,0", "--seed", "11", "--threads", threads]).stdout
    };
    let first = run("1");
    assert!(!first.is_empty());
    assert_eq!(first, run("1"));
    assert_eq!(first, run("3"));
    let other = debias(&["fit", "--data", &data, "--x", "1,0,0.5,0,0,0,0,0", "--seed", "12"]);
    assert_eq!(json(&other)["seed"].as_u64(), Some(12));
}

#[test]
fn single_replication_writes_one_record_and_exact_metrics_header() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("sim");
    let out = debias(&[
        "simulate",
        "--design",
        "mcar",
        "--reps",
        "1",
        "--n",
        "80",
        "--d",
        "10",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    stdout(&out);
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("avg_bias,coverage,avg_length,n_fail"));
    assert_eq!(lines.count(), 1);

    let records = fs::read_to_string(out_dir.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 2);
    assert!(records.lines().nth(1).unwrap().starts_with("3,0,"));

    let studentized = fs::read_to_string(out_dir.join("studentized.csv")).unwrap();
    let qq = fs::read_to_string(out_dir.join("qq.csv")).unwrap();
    assert_eq!(qq.lines().count(), studentized.lines().count());

    let run: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"].as_u64(), Some(3));
    assert_eq!(run["design"]["replications"].as_u64(), Some(1));
}

#[test]
fn qq_file_has_a_pair_per_successful_replication() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("sim");
    let args = [
        "simulate", "--design", "mcar", "--mcar-p", "0.8", "--reps", "6", "--n", "60", "--d", "10", "--out",
    ];
    let mut args: Vec<&str> = args.to_vec();
    args.push(out_dir.to_str().unwrap());
    stdout(&debias(&args));
    let records = fs::read_to_string(out_dir.join("records.csv")).unwrap();
    let ok = records.lines().skip(1).filter(|l| l.ends_with(',')).count();
    let qq = fs::read_to_string(out_dir.join("qq.csv")).unwrap();
    assert_eq!(qq.lines().count() - 1, ok);
    let mut previous = f64::NEG_INFINITY;
    for line in qq.lines().skip(1) {
        let theory: f64 = line.split(',').next().unwrap().parse().unwrap();
        assert!(theory > previous);
        previous = theory;
    }
}

#[test]
fn metrics_go_to_stdout_without_an_output_directory() {
    let out = debias(&["simulate", "--design", "mcar", "--reps", "2", "--n", "60", "--d", "10"]);
    let text = stdout(&out);
    assert!(text.starts_with("avg_bias,coverage,avg_length,n_fail\n"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn saved_replication_can_be_refitted() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("sim");
    let o = out_dir.to_str().unwrap();
    stdout(&debias(&[
        "simulate", "--design", "mar-logistic", "--reps", "2", "--n", "80", "--d", "12", "--out", o, "--save-data", "1",
    ]));
    let data = out_dir.join("data-rep1.csv");
    let query = out_dir.join("query-rep1.csv");
    let pi = format!("oracle:{}", out_dir.join("propensity-rep1.csv").display());
    let report = json(&debias(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--query",
        query.to_str().unwrap(),
        "--propensity",
        &pi,
    ]));
    assert_eq!(report["input"]["n"].as_u64(), Some(80));
    assert!(report["output"]["result"]["m_hat"].as_f64().unwrap().is_finite());
}

#[test]
fn singleton_grid_is_chosen_by_every_rule() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "data.csv", &table(50, 6));
    let report = json(&debias(&["cv", "--data", &data, "--x", "1,0,0,0,0,0", "--gammas", "10"]));
    let sel = &report["selection"];
    assert_eq!(sel["grid"].as_array().unwrap().len(), 1);
    for rule in ["min_cv", "one_se", "min_feas"] {
        assert_eq!(sel["chosen"][rule].as_f64(), Some(10.0), "{rule}");
    }
}

#[test]
fn default_grid_has_41_ascending_points() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "data.csv", &table(50, 6));
    let csv = stdout(&debias(&["cv", "--data", &data, "--x", "0.5,0,0,1,0,0", "--format", "csv"]));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("gamma,cv_mean,cv_se,feasible_all_folds,converged_all_folds,min_cv,one_se,min_feas")
    );
    let gammas: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(gammas.len(), 41);
    assert!(gammas.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*gammas.last().unwrap(), 50.0);
    let marked: usize = csv.lines().skip(1).filter(|l| l.ends_with(",true") || l.contains(",true,")).count();
    assert!(marked >= 1);
}

#[test]
fn x3_needs_a_hundred_dimensions() {
    let out = debias(&["simulate", "--query", "x3", "--d", "50", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d >= 100"));
}

#[test]
fn infeasible_grid_is_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    // d > n: a tiny gamma cannot be met on any fold.
    let data = write(dir.path(), "wide.csv", &table(15, 40));
    let mut x = vec!["0"; 40];
    x[0] = "1";
    let x = x.join(",");
    let out = debias(&[
        "fit", "--data", &data, "--x", &x, "--gammas", "1e-9", "--gamma-rule", "min-feas",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "data.csv", &table(50, 6));
    let cfg = write(dir.path(), "run.json", r#"{"seed": 5, "pipeline": {"level": 0.9, "gamma_rule": "min-cv"}}"#);
    let report = json(&debias(&["fit", "--config", &cfg, "--data", &data, "--x", "1,0,0,0,0,0"]));
    assert_eq!(report["seed"].as_u64(), Some(5));
    assert_eq!(report["output"]["result"]["level"].as_f64(), Some(0.9));
    assert_eq!(report["output"]["gamma_rule"].as_str(), Some("min-cv"));

    let report = json(&debias(&[
        "fit", "--config", &cfg, "--data", &data, "--x", "1,0,0,0,0,0", "--seed", "8", "--level", "0.8",
    ]));
    assert_eq!(report["seed"].as_u64(), Some(8));
    assert_eq!(report["output"]["result"]["level"].as_f64(), Some(0.8));

    let typo = write(dir.path(), "typo.json", r#"{"pipline": {}}"#);
    let out = debias(&["fit", "--config", &typo, "--data", &data, "--x", "1,0,0,0,0,0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_flags_and_inputs_use_distinct_exit_codes() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "toy.csv", TOY);
    assert_eq!(debias(&["fit", "--data", &data, "--x", "1,0", "--gamma-rule", "max"]).status.code(), Some(2));
    assert_eq!(debias(&["fit", "--data", &data, "--x", "1,0", "--level", "1.5"]).status.code(), Some(3));
    let short = write(dir.path(), "pi.csv", "0.5\n0.5\n");
    let oracle = format!("oracle:{short}");
    let out = debias(&["fit", "--data", &data, "--x", "1,0", "--propensity", &oracle]);
    assert_eq!(out.status.code(), Some(3));
    let missing = dir.path().join("absent.csv");
    assert_eq!(debias(&["fit", "--data", missing.to_str().unwrap(), "--x", "1,0"]).status.code(), Some(3));
}
