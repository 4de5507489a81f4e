//! End-to-end checks of the binary: exit codes, emitted files, determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_signalwise"))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const GEN_CONFIG: &str = r#"
[model]
n_assets = 2
gamma = 1.0
sigma = [[0.04, 0.01], [0.01, 0.09]]
quad_cost = 0.5
lambda_spread = 0.002

[run]
mode = "signalwise"

[generate]
seed = 7
steps = 8

[signals]
names = ["value", "momentum"]

[[constraints]]
kind = "position_bound"
asset = 0
lower = -0.5
upper = 0.5
label = "cap0"
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn simulate_writes_the_scenario_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), GEN_CONFIG);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["signals.csv", "returns.csv", "constraints.csv", "manifest.json"] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let signals = fs::read_to_string(out_dir.join("signals.csv")).unwrap();
    assert!(signals.starts_with("time,asset,signal_name,value\n"));
}

#[test]
fn simulate_is_deterministic_and_seed_override_changes_draws() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), GEN_CONFIG);
    let run = |out_name: &str, seed: Option<&str>| {
        let out_dir = dir.path().join(out_name);
        let mut cmd = bin();
        cmd.args(["simulate", "--config"]).arg(&config).arg("--out").arg(&out_dir);
        if let Some(s) = seed {
            cmd.args(["--seed-override", s]);
        }
        let out = cmd.output().unwrap();
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(out_dir.join("signals.csv")).unwrap()
    };
    let a = run("a", None);
    let b = run("b", None);
    let c = run("c", Some("9"));
    assert_eq!(a, b, "same seed must give identical bytes");
    assert_ne!(a, c, "a different seed must change the draws");
}

#[test]
fn attribute_mode_all_writes_three_report_sets() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), GEN_CONFIG);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["attribute", "--mode", "all", "--jobs", "2", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for mode in ["signalwise", "constraint-portfolios", "unconstrained"] {
        for stem in ["report", "summary", "diagnostics"] {
            let ext = if stem == "summary" { "json" } else { "csv" };
            let name = format!("{stem}_{mode}.{ext}");
            assert!(out_dir.join(&name).is_file(), "missing {name}");
        }
    }
}

#[test]
fn out_dir_defaults_to_the_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), GEN_CONFIG);
    let out_dir = dir.path().join("from_env");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&config)
        .env("SIGNALWISE_OUT", &out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("signals.csv").is_file());
}

#[test]
fn verify_passes_on_a_generated_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), GEN_CONFIG);
    let out = bin().args(["verify", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("all checks passed"), "{stdout}");
}

#[test]
fn broken_toml_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[model\nn_assets = 2");
    let out = bin().args(["simulate", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &format!("{GEN_CONFIG}\n[typo]\nx = 1\n"));
    let out = bin().args(["simulate", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn unknown_mode_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), GEN_CONFIG);
    let out = bin()
        .args(["attribute", "--mode", "sideways", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn missing_config_file_exits_3() {
    let out = bin()
        .args(["simulate", "--config", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

const DATA_CONFIG: &str = r#"
[model]
n_assets = 1
gamma = 1.0
sigma = [[0.04]]
quad_cost = 0.5

[data]
signals = "signals.csv"
returns = "returns.csv"
"#;

#[test]
fn missing_data_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), DATA_CONFIG);
    let out = bin().args(["attribute", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn corrupt_signals_header_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), DATA_CONFIG);
    fs::write(dir.path().join("signals.csv"), "when,asset,signal_name,value\n").unwrap();
    fs::write(dir.path().join("returns.csv"), "time,asset,return\n0,0,0.01\n").unwrap();
    let out = bin().args(["attribute", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn out_dir_colliding_with_a_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), GEN_CONFIG);
    let blocker = dir.path().join("blocked");
    fs::write(&blocker, "not a directory").unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&blocker)
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn infeasible_constraints_exit_4_naming_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &format!(
            "{GEN_CONFIG}\n\
             [[constraints]]\nkind = \"trade_bound\"\nasset = 0\nlower = 0.4\nupper = 0.5\n\
             [[constraints]]\nkind = \"trade_bound\"\nasset = 0\nlower = -0.5\nupper = -0.4\n"
        ),
    );
    let out = bin().args(["attribute", "--config"]).arg(&config).output().unwrap();
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("step 0"), "{}", stderr(&out));
}

#[test]
fn single_signal_rows_equal_the_total_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
[model]
n_assets = 2
gamma = 1.0
sigma = [[0.04, 0.01], [0.01, 0.09]]
quad_cost = 0.5

[generate]
seed = 3
steps = 6

[signals]
names = ["only"]
"#,
    );
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["attribute", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = fs::read_to_string(out_dir.join("report_signalwise.csv")).unwrap();
    let mut rows: std::collections::HashMap<(String, String, String), Vec<f64>> =
        std::collections::HashMap::new();
    for line in report.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let key = (fields[0].to_string(), fields[1].to_string(), fields[2].to_string());
        rows.insert(key, fields[3..].iter().map(|v| v.parse().unwrap()).collect());
    }
    for ((time, signal, asset), values) in &rows {
        if signal == "TOTAL" {
            continue;
        }
        let total = &rows[&(time.clone(), "TOTAL".to_string(), asset.clone())];
        for (a, b) in values.iter().zip(total) {
            assert!((a - b).abs() <= 1e-12, "t={time} i={asset}: {a} vs {b}");
        }
    }
}
