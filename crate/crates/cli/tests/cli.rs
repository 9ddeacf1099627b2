use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn tweedie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tweedie")).args(args).output().unwrap()
}

fn density(mu: &str, phi: &str, power: &str, y: &str) -> Output {
    tweedie(&["density", "--mu", mu, "--phi", phi, "--power", power, "--y", y])
}

fn log_density(out: &Output) -> f64 {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    v["log_density"].as_f64().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn density_examples() {
    assert!((log_density(&density("1", "1", "1.5", "0")) + 2.0).abs() < 1e-12);
    assert!((log_density(&density("1", "1", "2", "1")) + 1.0).abs() < 1e-12);
    let bad = density("1", "1", "0.5", "1");
    assert_eq!(bad.status.code(), Some(1));
    assert!(!bad.stderr.is_empty());
}

#[test]
fn density_reports_the_series() {
    let out = density("1", "1", "1.5", "1");
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["series"]["converged"].as_bool().unwrap());
}

fn simulate(dir: &Path, name: &str, n: &str, seed: &str) -> (Output, std::path::PathBuf) {
    let out = dir.join(name);
    let o = tweedie(&[
        "simulate", "--mu", "1", "--phi", "1", "--power", "1.5", "--n", n, "--seed", seed, "--out", path(&out),
    ]);
    (o, out)
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, pa) = simulate(dir.path(), "a.csv", "500", "7");
    let (b, pb) = simulate(dir.path(), "b.csv", "500", "7");
    let (c, pc) = simulate(dir.path(), "c.csv", "500", "8");
    assert!(a.status.success() && b.status.success() && c.status.success());
    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    assert_ne!(fs::read(&pa).unwrap(), fs::read(&pc).unwrap());
}

#[test]
fn simulate_with_no_draws_writes_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let (o, p) = simulate(dir.path(), "empty.csv", "0", "1");
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(p).unwrap().trim(), "y");
}

#[test]
fn simulated_zero_fraction_matches_the_atom() {
    let dir = tempfile::tempdir().unwrap();
    let (o, p) = simulate(dir.path(), "z.csv", "100000", "3");
    assert!(o.status.success());
    let text = fs::read_to_string(p).unwrap();
    let values: Vec<f64> = text.lines().skip(1).map(|l| l.parse().unwrap()).collect();
    assert_eq!(values.len(), 100_000);
    let zeros = values.iter().filter(|&&v| v == 0.0).count() as f64 / values.len() as f64;
    let want = (-2.0f64).exp();
    let se = (want * (1.0 - want) / values.len() as f64).sqrt();
    assert!((zeros - want).abs() < 4.0 * se, "{zeros} vs {want}");
}

#[test]
fn simulate_rejects_powers_without_a_generator() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let o = tweedie(&["simulate", "--mu", "1", "--phi", "1", "--power", "0.5", "--n", "5", "--seed", "1", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_data(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("data.csv");
    let mut text = String::from("y,x1,x2\n");
    for i in 0..200 {
        let x1 = -1.0 + 2.0 * i as f64 / 199.0;
        let x2 = (i % 2) as f64;
        let mu = (1.0 + 0.5 * x1 - 0.4 * x2).exp();
        let wobble = [0.6, 1.3, 0.9, 1.5, 0.7][i % 5];
        text.push_str(&format!("{},{x1},{x2}\n", mu * wobble));
    }
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn fit_writes_a_json_result() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = dir.path().join("fit.json");
    let o = tweedie(&[
        "fit", "--data", path(&data), "--response", "y", "--covariates", "x1,x2", "--method", "qmle", "--out", path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["method"], "QMLE");
    assert!(v["converged"].as_bool().unwrap());
    let coefs = v["coefficients"].as_array().unwrap();
    let names: Vec<&str> = coefs.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["(Intercept)", "x1", "x2"]);
    assert!((coefs[1]["estimate"].as_f64().unwrap() - 0.5).abs() < 0.2);
    assert_eq!(v["vcov"].as_array().unwrap().len(), 5);
    for key in ["delta", "phi", "power", "power_se", "iterations"] {
        assert!(v[key].is_number(), "{key}");
    }
}

#[test]
fn fit_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = tweedie(&[
            "fit", "--data", path(&data), "--response", "y", "--covariates", "x1,x2", "--method", "pmle", "--out",
            path(&out),
        ]);
        assert!(o.status.success());
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn fit_with_a_missing_column_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let out = dir.path().join("fit.json");
    let o = tweedie(&[
        "fit", "--data", path(&data), "--response", "y", "--covariates", "x1,nope", "--method", "mle", "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
    assert!(!out.exists());
}

#[test]
fn malformed_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "preset = \"p15-small\"\nn_reps = \"many\"\n").unwrap();
    let o = tweedie(&["study", "--config", path(&cfg), "--out-dir", path(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("n_reps") || msg.contains("line"), "{msg}");
}

#[test]
fn preset_study_runs_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.toml");
    fs::write(&cfg, "preset = \"p15-small\"\nn_reps = 200\n").unwrap();
    let out = dir.path().join("out");
    let start = Instant::now();
    let o = tweedie(&["study", "--config", path(&cfg), "--out-dir", path(&out), "--raw"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed() < Duration::from_secs(600), "{:?}", start.elapsed());

    let mut reader = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["method", "param", "bias", "emp_sd", "mean_se", "coverage", "efficiency", "n_converged"]);
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        rows += 1;
        if !rec[5].is_empty() {
            let c: f64 = rec[5].parse().unwrap();
            assert!((0.0..=1.0).contains(&c), "coverage {c}");
        }
    }
    assert_eq!(rows, 15);
    assert!(out.join("raw.csv").exists());
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("study.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["n_reps"], 200);
}
