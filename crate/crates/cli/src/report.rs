//! Report writers. Every number goes through one fixed format and every
//! row order is pinned, so identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array1;

use signalwise::attribution::backtest::BacktestRun;
use signalwise::attribution::{transfer_report, Mode, TransferReport};
use signalwise::effective::Classification;
use signalwise::qpsolver::ConstraintKind;
use signalwise::scenarios::Scenario;

/// 17 significant digits: enough to round-trip an f64 exactly.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_text(path: &Path, text: &str) -> io::Result<()> {
    fs::write(path, text.as_bytes())
}

/// Per-step, per-component, per-asset report with a trailing TOTAL block
/// per step. Cost columns split the step totals by component so that the
/// component rows of a (time, asset) cell sum to its TOTAL row.
pub fn write_report_csv(
    path: &Path,
    scenario: &Scenario<f64>,
    run: &BacktestRun<f64>,
) -> io::Result<()> {
    let h = &run.history;
    let n = h.n_assets();
    let lambda_mat = scenario.model.lambda_matrix();
    let sigma = &scenario.model.sigma;
    let l0 = scenario.model.lambda_spread;
    let ll = scenario.model.lambda_financing;

    let mut out = String::new();
    out.push_str("time,signal,asset,trade,position,pnl,risk_contrib,quad_cost,spread_cost,financing_cost\n");
    for t in 0..h.steps() {
        let x_tot = h.total_position.row(t);
        let dx_tot = h.total_trade.row(t);
        let sx: Array1<f64> = sigma.dot(&x_tot);
        let lx: Array1<f64> = lambda_mat.dot(&dx_tot);
        let ret = scenario.realized_returns.row(t);
        let sgn = |v: f64| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        for c in 0..h.n_components() {
            for i in 0..n {
                let dx = h.trades[[t, c, i]];
                let x = h.positions[[t, c, i]];
                let row = [
                    dx,
                    x,
                    x * ret[i],
                    x * sx[i],
                    0.5 * dx * lx[i],
                    l0 * dx * sgn(dx_tot[i]),
                    ll * x * sgn(x_tot[i]),
                ];
                let _ = write!(out, "{t},{},{i}", h.component_names[c]);
                for v in row {
                    out.push(',');
                    out.push_str(&num(v));
                }
                out.push('\n');
            }
        }
        for i in 0..n {
            let dx = dx_tot[i];
            let x = x_tot[i];
            let row = [
                dx,
                x,
                x * ret[i],
                x * sx[i],
                0.5 * dx * lx[i],
                l0 * dx.abs(),
                ll * x.abs(),
            ];
            let _ = write!(out, "{t},TOTAL,{i}");
            for v in row {
                out.push(',');
                out.push_str(&num(v));
            }
            out.push('\n');
        }
    }
    write_text(path, &out)
}

/// One row per binding constraint or kink per step.
pub fn write_diagnostics_csv(path: &Path, run: &BacktestRun<f64>) -> io::Result<()> {
    let mut out = String::new();
    out.push_str("time,label,side,classification,lambda,eta,bound,degenerate\n");
    for step in &run.diagnostics.steps {
        for rec in &step.active {
            let cls = match rec.classification {
                Classification::TradeLike => "trade",
                Classification::PositionLike => "position",
            };
            let _ = writeln!(
                out,
                "{},{},{},{cls},{},{},{},{}",
                step.time,
                rec.label,
                rec.side,
                num(rec.multiplier),
                num(rec.eta),
                num(rec.bound),
                rec.degenerate
            );
        }
    }
    write_text(path, &out)
}

fn totals_object(h: &signalwise::attribution::AttributionHistory<f64>, c: usize) -> serde_json::Value {
    let sum = |field: &ndarray::Array2<f64>| field.column(c).sum();
    serde_json::json!({
        "pnl": sum(&h.pnl),
        "risk": sum(&h.risk),
        "quad_cost": sum(&h.quad_cost),
        "spread_cost": sum(&h.spread_cost),
        "financing_cost": sum(&h.financing_cost),
    })
}

fn transfer_object(tr: &Option<TransferReport<f64>>) -> serde_json::Value {
    match tr {
        Some(tr) => {
            let mut per = serde_json::Map::new();
            for (name, tc) in &tr.per_signal {
                per.insert(name.clone(), serde_json::json!(tc));
            }
            serde_json::json!({ "per_signal": per, "total": tr.total })
        }
        None => serde_json::Value::Null,
    }
}

/// Run-level summary. `reference` is the unconstrained companion run used
/// for transfer coefficients; when it is the run itself they are all 1.
pub fn write_summary_json(
    path: &Path,
    scenario: &Scenario<f64>,
    run: &BacktestRun<f64>,
    reference: &BacktestRun<f64>,
) -> io::Result<()> {
    let h = &run.history;
    let transfer = transfer_report(h, &reference.history, &scenario.model.sigma).ok();

    let mut per_signal = serde_json::Map::new();
    for c in 0..h.n_components() {
        per_signal.insert(h.component_names[c].clone(), totals_object(h, c));
    }
    let totals = serde_json::json!({
        "pnl": h.total_pnl.sum(),
        "risk": h.total_risk.sum(),
        "quad_cost": h.total_quad_cost.sum(),
        "spread_cost": h.total_spread_cost.sum(),
        "financing_cost": h.total_financing_cost.sum(),
    });

    let mut worst_gap = 0.0f64;
    for t in 0..h.steps() {
        worst_gap = worst_gap.max(h.component_sum_gap(t));
    }
    let doc = serde_json::json!({
        "mode": h.mode.as_str(),
        "steps": h.steps(),
        "n_assets": h.n_assets(),
        "n_signals": h.n_signals,
        "components": h.component_names,
        "per_signal": per_signal,
        "totals": totals,
        "transfer": transfer_object(&transfer),
        "max_kkt_residual": run.diagnostics.max_kkt_residual(),
        "max_reconstruction_residual": run.diagnostics.max_reconstruction_residual(),
        "max_attribution_sum_residual": worst_gap,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("static document");
    text.push('\n');
    write_text(path, &text)
}

/// Long-format dump of the constraint book, schedules included.
pub fn write_constraints_csv(path: &Path, scenario: &Scenario<f64>) -> io::Result<()> {
    let mut out = String::new();
    out.push_str("label,kind,group,from_step,asset,weight,lower,upper\n");
    for sc in &scenario.constraints {
        let kind = match sc.base.kind {
            ConstraintKind::TradeBound => "trade_bound",
            ConstraintKind::PositionBound => "position_bound",
            ConstraintKind::TradeExposure => "trade_exposure",
            ConstraintKind::PositionExposure => "position_exposure",
            _ => "internal",
        };
        let group = sc.group.as_deref().unwrap_or("");
        let emit = |from_step: usize, lower: f64, upper: f64, out: &mut String| {
            for (i, w) in sc.base.v.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let _ = writeln!(
                    out,
                    "{},{kind},{group},{from_step},{i},{},{},{}",
                    sc.base.label,
                    num(*w),
                    num(lower),
                    num(upper)
                );
            }
        };
        emit(0, sc.base.lower, sc.base.upper, &mut out);
        for change in &sc.schedule {
            emit(change.from_step, change.lower, change.upper, &mut out);
        }
    }
    write_text(path, &out)
}

/// Scenario facts a reader needs before opening the CSVs.
pub fn write_manifest_json(path: &Path, scenario: &Scenario<f64>, mode: Mode) -> io::Result<()> {
    let doc = serde_json::json!({
        "seed": scenario.seed,
        "n_assets": scenario.n_assets(),
        "steps": scenario.steps(),
        "signals": scenario.signals.names,
        "mode": mode.as_str(),
        "n_constraints": scenario.constraints.len(),
        "benchmark": scenario.benchmark.as_ref().map(|b| b.to_vec()),
        "files": {
            "signals": "signals.csv",
            "returns": "returns.csv",
            "constraints": "constraints.csv",
        },
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("static document");
    text.push('\n');
    write_text(path, &text)
}
