//! Batch front end: simulate scenarios, attribute runs, verify invariants.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error,
//! 3 I/O error, 4 solver failure.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;

use signalwise::attribution::backtest::{
    run_backtest, BacktestError, BacktestOptions, BacktestRun,
};
use signalwise::attribution::Mode;
use signalwise::model::{build_static_matrices, scale_signals_dynamic};
use signalwise::oracle::{oracle_objective, oracle_solve, OracleSpec};
use signalwise::scenarios::config::{build_run, parse_config, parse_mode, ConfigError, LoadedRun};
use signalwise::scenarios::csv::{write_returns_csv, write_signals_csv, CsvError};
use signalwise::scenarios::Scenario;

const OUT_DIR_ENV: &str = "SIGNALWISE_OUT";

/// Engine trades are compared to the grid incumbent at one refined grid
/// step of the default oracle schedule.
const ORACLE_TRADE_TOL: f64 = 2e-4;

#[derive(Parser)]
#[command(
    name = "signalwise",
    version,
    about = "Constrained portfolio backtests with exact per-signal attribution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a scenario from a config and write its data files.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run a backtest and write report, summary and diagnostics files.
    Attribute {
        #[command(flatten)]
        common: Common,
        /// signalwise, constraint-portfolios, unconstrained or all.
        #[arg(long)]
        mode: Option<String>,
        /// Worker threads when several modes run at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-run the invariant checks and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Relative threshold for the residual checks.
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration, TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to $SIGNALWISE_OUT, then the config's
    /// run.out_dir, then the current directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the generation seed from the config.
    #[arg(long)]
    seed_override: Option<u64>,
}

enum Failure {
    Verify,
    Config(String),
    Io(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Solver(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verify => "verification failed",
            Failure::Config(m) | Failure::Io(m) | Failure::Solver(m) => m,
        }
    }
}

fn classify_config(err: ConfigError) -> Failure {
    let msg = err.to_string();
    match &err {
        ConfigError::Io { .. } | ConfigError::Csv(CsvError::Io { .. }) => Failure::Io(msg),
        _ => Failure::Config(msg),
    }
}

fn classify_backtest(err: BacktestError) -> Failure {
    let msg = err.to_string();
    match &err {
        BacktestError::Scenario(_)
        | BacktestError::Model(_)
        | BacktestError::SeparableShape { .. } => Failure::Config(msg),
        _ => Failure::Solver(msg),
    }
}

fn csv_write_failure(err: CsvError) -> Failure {
    Failure::Io(err.to_string())
}

fn write_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("cannot write {}: {e}", path.display()))
}

fn load(common: &Common) -> Result<LoadedRun, Failure> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Failure::Io(format!("cannot read {}: {e}", common.config.display())))?;
    let mut config =
        parse_config(&text, &common.config.display().to_string()).map_err(classify_config)?;
    if let Some(seed) = common.seed_override {
        match config.generate.as_mut() {
            Some(generate) => generate.seed = seed,
            None => eprintln!("warning: --seed-override ignored, config reads data files"),
        }
    }
    let base = common.config.parent().unwrap_or(Path::new("."));
    build_run(&config, base).map_err(classify_config)
}

fn resolve_out(common: &Common, loaded: &LoadedRun) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    loaded.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))
}

fn run_one(scenario: &Scenario<f64>, mode: Mode) -> Result<BacktestRun<f64>, Failure> {
    let options = BacktestOptions { mode, ..BacktestOptions::default() };
    run_backtest(scenario, &options).map_err(classify_backtest)
}

/// Runs each mode, fanning at most `jobs` backtests at a time.
fn run_modes(
    scenario: &Scenario<f64>,
    tasks: &[Mode],
    jobs: usize,
) -> Result<Vec<BacktestRun<f64>>, Failure> {
    let jobs = jobs.max(1);
    if jobs == 1 || tasks.len() == 1 {
        return tasks.iter().map(|m| run_one(scenario, *m)).collect();
    }
    let mut out = Vec::with_capacity(tasks.len());
    for wave in tasks.chunks(jobs) {
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|m| scope.spawn(move || run_one(scenario, *m)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect::<Vec<_>>()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn cmd_simulate(common: Common) -> Result<(), Failure> {
    let loaded = load(&common)?;
    let dir = resolve_out(&common, &loaded);
    ensure_dir(&dir)?;
    let s = &loaded.scenario;
    write_signals_csv(&dir.join("signals.csv"), &s.signals).map_err(csv_write_failure)?;
    write_returns_csv(&dir.join("returns.csv"), &s.realized_returns).map_err(csv_write_failure)?;
    let constraints_path = dir.join("constraints.csv");
    report::write_constraints_csv(&constraints_path, s)
        .map_err(write_failure(&constraints_path))?;
    let manifest_path = dir.join("manifest.json");
    report::write_manifest_json(&manifest_path, s, loaded.mode)
        .map_err(write_failure(&manifest_path))?;
    println!(
        "wrote signals.csv, returns.csv, constraints.csv, manifest.json to {}",
        dir.display()
    );
    Ok(())
}

fn cmd_attribute(common: Common, mode_flag: Option<String>, jobs: usize) -> Result<(), Failure> {
    let loaded = load(&common)?;
    let dir = resolve_out(&common, &loaded);
    ensure_dir(&dir)?;
    let scenario = loaded.scenario;

    let modes: Vec<Mode> = match mode_flag.as_deref() {
        None => vec![loaded.mode],
        Some("all") => vec![Mode::SignalWise, Mode::ConstraintPortfolios, Mode::Unconstrained],
        Some(s) => {
            vec![parse_mode(s).ok_or_else(|| Failure::Config(format!("unknown mode '{s}'")))?]
        }
    };
    // the unconstrained companion anchors the transfer coefficients
    let mut tasks = modes.clone();
    if !tasks.contains(&Mode::Unconstrained) {
        tasks.push(Mode::Unconstrained);
    }
    let runs = run_modes(&scenario, &tasks, jobs)?;
    let reference_idx = tasks.iter().position(|m| *m == Mode::Unconstrained).expect("pushed above");

    for (mi, mode) in modes.iter().enumerate() {
        let tag = mode.as_str();
        let report_path = dir.join(format!("report_{tag}.csv"));
        report::write_report_csv(&report_path, &scenario, &runs[mi])
            .map_err(write_failure(&report_path))?;
        let summary_path = dir.join(format!("summary_{tag}.json"));
        report::write_summary_json(&summary_path, &scenario, &runs[mi], &runs[reference_idx])
            .map_err(write_failure(&summary_path))?;
        let diag_path = dir.join(format!("diagnostics_{tag}.csv"));
        report::write_diagnostics_csv(&diag_path, &runs[mi])
            .map_err(write_failure(&diag_path))?;
        println!("{tag}: wrote report_{tag}.csv, summary_{tag}.json, diagnostics_{tag}.csv");
    }
    Ok(())
}

struct CheckTable {
    all_pass: bool,
}

impl CheckTable {
    fn new() -> Self {
        println!("{:<28} {:>12} {:>12}  status", "check", "worst", "limit");
        CheckTable { all_pass: true }
    }

    fn row(&mut self, name: &str, worst: f64, limit: f64) {
        let pass = worst <= limit;
        self.all_pass &= pass;
        println!(
            "{name:<28} {worst:>12.3e} {limit:>12.3e}  {}",
            if pass { "pass" } else { "FAIL" }
        );
    }

    fn skipped(&mut self, name: &str, why: &str) {
        println!("{name:<28} {:>12} {:>12}  skipped ({why})", "-", "-");
    }
}

fn cmd_verify(common: Common, tol: f64) -> Result<(), Failure> {
    let loaded = load(&common)?;
    let scenario = loaded.scenario;
    let run = run_one(&scenario, loaded.mode)?;
    let h = &run.history;

    let signals_used = match &scenario.dynamic {
        Some(params) => scale_signals_dynamic(&scenario.signals, params, scenario.model.gamma)
            .map_err(|e| Failure::Config(e.to_string()))?,
        None => scenario.signals.clone(),
    };
    let g_scale = signals_used.g.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let x_scale = h.total_position.iter().fold(1.0f64, |a, v| a.max(v.abs()));

    let mut table = CheckTable::new();
    table.row("kkt residual", run.diagnostics.max_kkt_residual(), tol * g_scale);
    table.row(
        "reconstruction residual",
        run.diagnostics.max_reconstruction_residual(),
        tol * g_scale,
    );
    let mut worst_gap = 0.0f64;
    for t in 0..h.steps() {
        worst_gap = worst_gap.max(h.component_sum_gap(t));
    }
    table.row("attribution sums", worst_gap, tol * x_scale);

    let n = scenario.n_assets();
    if n <= 3 {
        let (q, p) = build_static_matrices(&scenario.model)
            .map_err(|e| Failure::Config(e.to_string()))?;
        let spec = OracleSpec::default();
        let steps = h.steps();
        let sampled: Vec<usize> = if steps <= 6 {
            (0..steps).collect()
        } else {
            (0..6).map(|k| k * (steps - 1) / 5).collect()
        };
        let oblique = sampled.iter().any(|&t| {
            scenario
                .constraints_at(t)
                .iter()
                .any(|c| c.v.iter().filter(|w| **w != 0.0).count() > 1)
        });
        let mut worst_obj_gap = 0.0f64;
        let mut worst_trade = 0.0f64;
        let mut oracle_ok = true;
        for &t in &sampled {
            let x_prev: Array1<f64> = if t == 0 {
                Array1::zeros(n)
            } else {
                h.total_position.row(t - 1).to_owned()
            };
            let g_total = signals_used.total_at(t);
            let constraints = scenario.constraints_at(t);
            let engine_trade = h.total_trade.row(t).to_owned();
            match oracle_solve(&scenario.model, &x_prev, &g_total, &constraints, &spec) {
                Ok(reference) => {
                    let f_engine = oracle_objective(
                        &scenario.model,
                        &q,
                        &p,
                        &x_prev,
                        &g_total,
                        &engine_trade,
                    );
                    worst_obj_gap = worst_obj_gap.max(reference.objective - f_engine);
                    for i in 0..n {
                        worst_trade =
                            worst_trade.max((engine_trade[i] - reference.trade[i]).abs());
                    }
                }
                Err(e) => {
                    eprintln!("oracle failed at step {t}: {e}");
                    oracle_ok = false;
                }
            }
        }
        if oracle_ok {
            table.row("oracle objective gap", worst_obj_gap, 1e-9 * g_scale.max(1.0));
            if oblique {
                table.skipped("oracle trade match", "dense constraint rows, objective check only");
            } else {
                table.row("oracle trade match", worst_trade, ORACLE_TRADE_TOL);
            }
        } else {
            table.all_pass = false;
        }
    } else {
        table.skipped("oracle agreement", &format!("n={n} > 3"));
    }

    if table.all_pass {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { common } => cmd_simulate(common),
        Command::Attribute { common, mode, jobs } => cmd_attribute(common, mode, jobs),
        Command::Verify { common, tol } => cmd_verify(common, tol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
