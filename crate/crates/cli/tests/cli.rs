//! The binary must print exactly what the library computes.

use std::path::PathBuf;
use std::process::{Command, Output};
use std::sync::Arc;

use promise_ledger::geometry::support_value;
use promise_ledger::mechanism::{
    finite_horizon_schedule, BallMechanism, BuildOptions, ConstantPolicy, FiniteHorizonConfig, FiniteHorizonMechanism,
    Stage,
};
use promise_ledger::rates::predicted_eta;
use promise_ledger::sim::{
    dyadic_gammas, run_discounted, run_finite, sweep, sweep_csv, BuilderPolicy, Strategy, SweepConfig, SweepGrid,
};
use promise_ledger::{JointSupport, UtilityProfile};
use serde_json::Value;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn profile(name: &str) -> UtilityProfile {
    UtilityProfile::from_path(data(name)).unwrap()
}

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_promise-ledger"));
    cmd.args(args).env_remove("PROMISE_LEDGER_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn json(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn path(p: &PathBuf) -> &str {
    p.to_str().unwrap()
}

#[test]
fn check_reports_classification() {
    let e1 = data("e1.json");
    let v = json(&run(&["check", "--instance", path(&e1)]));
    assert_eq!(v["classification"], "None");
    assert_eq!(v["agent_sets"]["i_set"], serde_json::json!([0, 1]));
    let p = profile("e1.json");
    assert_eq!(v["first_best"].as_f64().unwrap(), support_value(&p, p.alpha()));
}

#[test]
fn frontier_matches_support_value() {
    let e1 = data("e1.json");
    let v = json(&run(&["frontier", "--instance", path(&e1), "--beta", "1,1"]));
    let got = v["support_value"].as_f64().unwrap();
    assert_eq!(got, support_value(&profile("e1.json"), &[1.0, 1.0]));
    assert!((got - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn usage_errors_exit_2() {
    let e1 = data("e1.json");
    assert_eq!(run(&["frontier", "--instance", "no/such/file.json", "--beta", "1,1"]).status.code(), Some(2));
    assert_eq!(run(&["frontier", "--instance", path(&e1), "--beta", "1"]).status.code(), Some(2));
    assert_eq!(run(&["check", "--instance", path(&e1), "--const", "bogus=1"]).status.code(), Some(2));
    assert_eq!(run(&["check", "--instance", path(&e1), "--const", "C"]).status.code(), Some(2));
    assert_eq!(run(&["explode"]).status.code(), Some(2));
    assert_eq!(run_env(&["check", "--instance", path(&e1)], &[("PROMISE_LEDGER_THREADS", "0")]).status.code(), Some(2));
}

#[test]
fn invariant_failures_exit_1() {
    let e1 = data("e1.json");
    // B((0.3, 0.3), 0.15) leaves the region.
    let out = run(&["mechanism", "--instance", path(&e1), "--gamma", "0.9999", "--x", "0.3,0.3", "--r", "0.075", "--delta", "0.075"]);
    assert_eq!(out.status.code(), Some(1));
    // Chain floor above the margin.
    let out = run(&["mechanism", "--instance", path(&e1), "--gamma", "0.9", "--x", "0.2,0.2", "--r", "0.05", "--delta", "0.01", "--const", "C=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mechanism_matches_library() {
    let e1 = data("e1.json");
    let v = json(&run(&[
        "mechanism", "--instance", path(&e1), "--gamma", "0.9999", "--x", "0.2,0.2", "--r", "0.0751", "--delta", "0.0751",
        "--const", "C=56.25",
    ]));
    let p = profile("e1.json");
    let opts = BuildOptions { constant: ConstantPolicy::Fixed(56.25), ..Default::default() };
    let support = Arc::new(JointSupport::new(&p).unwrap());
    let m = BallMechanism::build(support, Stage::stationary(&[0.2, 0.2], 0.0751, 0.0751, 0.9999), &opts).unwrap();
    assert_eq!(v["region_gap"].as_f64().unwrap(), m.region_gap());
    assert_eq!(floats(&v["alpha_best_state"]), m.alpha_best_state().unwrap().u);
    assert_eq!(v["ic"]["passed"], true);
}

#[test]
fn simulate_matches_library_at_any_thread_count() {
    let e1 = data("e1.json");
    let args = [
        "simulate", "--instance", path(&e1), "--gamma", "0.99", "--x", "0.2,0.2", "--r", "0.0751", "--delta", "0.0751",
        "--const", "C=0.5", "--episodes", "60", "--seed", "7",
    ];
    let one = json(&run_env(&args, &[("PROMISE_LEDGER_THREADS", "1")]));
    let two = json(&run_env(&args, &[("PROMISE_LEDGER_THREADS", "2")]));
    assert_eq!(one, two);

    let p = profile("e1.json");
    let opts = BuildOptions { constant: ConstantPolicy::Fixed(0.5), ..Default::default() };
    let support = Arc::new(JointSupport::new(&p).unwrap());
    let m = BallMechanism::build(support, Stage::stationary(&[0.2, 0.2], 0.0751, 0.0751, 0.99), &opts).unwrap();
    let s = run_discounted(&m, &m.alpha_best_state().unwrap(), 60, 7, &Strategy::Truthful).unwrap();
    assert_eq!(floats(&one["mean"]), s.mean);
    assert_eq!(floats(&one["stderr"]), s.stderr);
}

#[test]
fn finite_simulate_matches_library() {
    let e1 = data("e1.json");
    let x = 0.25 - 0.007 * std::f64::consts::FRAC_1_SQRT_2;
    let xs = format!("{x},{x}");
    let v = json(&run(&[
        "simulate", "--instance", path(&e1), "--horizon", "1000", "--x", &xs, "--r", "0.01", "--delta", "0.0035",
        "--const", "C=1e-4", "--episodes", "40", "--seed", "3",
    ]));
    let p = profile("e1.json");
    let cfg = FiniteHorizonConfig { constant: 1e-4, ..Default::default() };
    let sched = finite_horizon_schedule(&p, &[x, x], 0.01, 0.0035, 1000, &cfg).unwrap();
    let m = FiniteHorizonMechanism::from_schedule(Arc::new(JointSupport::new(&p).unwrap()), &sched).unwrap();
    let s = run_finite(&m, 40, 3).unwrap();
    assert_eq!(floats(&v["mean"]), s.mean);
    assert_eq!(v["exact_gap"].as_f64().unwrap(), s.exact_gap);
    // This schedule crosses the no-information facet, so play is not constant.
    assert!(s.exact_gap < 1.0 / 6.0 - 1e-4);
}

#[test]
fn sweep_csv_is_bitwise_library_output() {
    let tf = data("tie_free.json");
    let out = run(&["sweep", "--instance", path(&tf), "--policy", "universal", "--const", "C=0.05"]);
    assert_eq!(out.status.code(), Some(0));
    let config = SweepConfig {
        grid: SweepGrid::Gammas(dyadic_gammas(4..=10)),
        policy: BuilderPolicy::UniversalRate { constant: 0.05 },
    };
    let want = sweep_csv(&sweep(&profile("tie_free.json"), &config).unwrap());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), want);
}

#[test]
fn sweep_writes_files() {
    let e1 = data("e1.json");
    let dir = std::env::temp_dir().join(format!("promise-ledger-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("sweep.csv");
    let rates = dir.join("rates.csv");
    let out = run(&[
        "sweep", "--instance", path(&e1), "--policy", "finite", "--r", "0.01", "--horizons", "100,178,316,562,1000",
        "--const", "C=3e-6", "--out", path(&csv), "--rates-out", path(&rates),
    ]);
    let report = json(&out);
    assert!(report["slope"].as_f64().unwrap() < -0.85);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("parameter,rate_parameter,r,delta,gap,x1,x2\n"));
    assert_eq!(std::fs::read_to_string(&rates).unwrap().lines().count(), 6);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn rates_reports_eta_star() {
    let e1 = data("e1.json");
    let v = json(&run(&["rates", "--instance", path(&e1), "--gamma", "0.99"]));
    let p = profile("e1.json");
    let partition: Vec<Vec<usize>> = serde_json::from_value(v["partition"].clone()).unwrap();
    assert_eq!(partition, vec![vec![0, 1]]);
    assert_eq!(v["eta_star"].as_f64().unwrap(), predicted_eta(&p, &partition, 0.99, 1.0).unwrap());
}
