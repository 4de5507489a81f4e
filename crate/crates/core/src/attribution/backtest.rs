//! Step loop: solve, read multipliers, advance each component portfolio.

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::attribution::{
    attribute_financing_cost, attribute_pnl, attribute_quadratic_cost, attribute_risk,
    attribute_spread_cost, update_price_distortion, AttributionHistory, Mode,
};
use crate::closedform::{solve_asset_step, ClosedFormError, SingleAssetStep};
use crate::effective::{
    attribution_multipliers, effective_matrices, solve_effective_step, verify_reconstruction,
    AttributionMultiplier, Classification, EffectiveError,
};
use crate::model::{build_static_matrices, scale_signals_dynamic, ModelError};
use crate::qpsolver::{
    assemble_problem, solve, solve_warm, ConstraintKind, ConstraintSpec, QpError, QpSolution,
    RowSource, Side, SolverOptions, VarMap,
};
use crate::scalar::Scalar;
use crate::scenarios::{Scenario, ScenarioError};

#[derive(Debug, Clone)]
pub struct BacktestOptions<T> {
    pub mode: Mode,
    pub solver: SolverOptions<T>,
}

impl<T: Scalar> Default for BacktestOptions<T> {
    fn default() -> Self {
        BacktestOptions { mode: Mode::SignalWise, solver: SolverOptions::default() }
    }
}

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("step {step}: {source}")]
    Solver { step: usize, source: QpError },
    #[error("step {step}: {source}")]
    Effective { step: usize, source: EffectiveError },
    #[error("step {step}: {source}")]
    Separable { step: usize, source: ClosedFormError },
    #[error("the power cost needs {reason}")]
    SeparableShape { reason: String },
}

/// One binding constraint or kink at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveConstraintRecord<T> {
    pub label: String,
    /// +1 upper side, −1 lower.
    pub side: i8,
    pub classification: Classification,
    pub multiplier: T,
    pub eta: T,
    pub bound: T,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics<T> {
    pub time: usize,
    pub active: Vec<ActiveConstraintRecord<T>>,
    /// Worst feasibility/stationarity violation of the solved step.
    pub kkt_residual: T,
    /// Residual of the effective optimality equation at the solved trade.
    pub reconstruction_residual: T,
    /// Gap between the component sum and the total after the step.
    pub component_gap: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunDiagnostics<T> {
    pub mode: Mode,
    pub dynamic_scaled: bool,
    pub steps: Vec<StepDiagnostics<T>>,
}

impl<T: Scalar> RunDiagnostics<T> {
    pub fn max_kkt_residual(&self) -> T {
        self.steps.iter().fold(T::zero(), |a, s| a.max(s.kkt_residual))
    }

    pub fn max_reconstruction_residual(&self) -> T {
        self.steps.iter().fold(T::zero(), |a, s| a.max(s.reconstruction_residual))
    }

    pub fn max_component_gap(&self) -> T {
        self.steps.iter().fold(T::zero(), |a, s| a.max(s.component_gap))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRun<T> {
    pub history: AttributionHistory<T>,
    pub diagnostics: RunDiagnostics<T>,
    pub final_distortion: Option<Array1<T>>,
}

struct SolvedStep<T> {
    trade: Array1<T>,
    mults: Vec<AttributionMultiplier<T>>,
    kkt_residual: T,
    /// Trade-space force each user constraint exerts, by constraint index.
    constraint_forces: Array2<T>,
    spread_force: Array1<T>,
    financing_force: Array1<T>,
    power_force: Array1<T>,
}

fn basis<T: Scalar>(n: usize, i: usize) -> Array1<T> {
    let mut v = Array1::zeros(n);
    v[i] = T::one();
    v
}

/// Trade-space forces from the row multipliers of a dense solve:
/// upper rows push along −v, lower rows along +v.
fn row_forces<T: Scalar>(
    solution: &QpSolution<T>,
    var_map: &VarMap,
    constraints: &[ConstraintSpec<T>],
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let n = var_map.n_assets;
    let mut per_constraint = Array2::zeros((constraints.len(), n));
    let mut spread = Array1::zeros(n);
    let mut financing = Array1::zeros(n);
    for (r, src) in var_map.rows.iter().enumerate() {
        let lam = solution.multipliers[r];
        if lam == T::zero() {
            continue;
        }
        match src {
            RowSource::User { constraint, side } => {
                let sgn = match side {
                    Side::Upper => -T::one(),
                    Side::Lower => T::one(),
                };
                for i in 0..n {
                    per_constraint[[*constraint, i]] += sgn * lam * constraints[*constraint].v[i];
                }
            }
            RowSource::SpreadUpper(i) => spread[*i] -= lam,
            RowSource::SpreadLower(i) => spread[*i] += lam,
            RowSource::FinancingUpper(i) => financing[*i] -= lam,
            RowSource::FinancingLower(i) => financing[*i] += lam,
            RowSource::Opaque => {}
        }
    }
    (per_constraint, spread, financing)
}

fn active_records<T: Scalar>(mults: &[AttributionMultiplier<T>]) -> Vec<ActiveConstraintRecord<T>> {
    mults
        .iter()
        .filter(|m| m.eta != T::zero())
        .map(|m| ActiveConstraintRecord {
            label: m.constraint_label.clone(),
            side: m.epsilon,
            classification: m.classification,
            multiplier: m.lambda,
            eta: m.eta,
            bound: m.bound_used,
            degenerate: m.degenerate,
        })
        .collect()
}

fn dense_step<T: Scalar>(
    t: usize,
    scenario: &Scenario<T>,
    q: &Array2<T>,
    p: &Array2<T>,
    x_prev: &Array1<T>,
    g_total: &Array1<T>,
    constraints: &[ConstraintSpec<T>],
    options: &BacktestOptions<T>,
    warm: &mut Option<(Array1<T>, Vec<usize>)>,
) -> Result<SolvedStep<T>, BacktestError> {
    let model = &scenario.model;
    let problem = assemble_problem(model, q, p, x_prev, g_total, constraints)
        .map_err(|source| BacktestError::Solver { step: t, source })?;
    let solution = match warm.take() {
        Some((y0, a0)) if y0.len() == problem.h.nrows() => {
            solve_warm(&problem, &options.solver, &y0, &a0)
        }
        _ => solve(&problem, &options.solver),
    }
    .map_err(|source| BacktestError::Solver { step: t, source })?;
    let mults = attribution_multipliers(
        &solution,
        constraints,
        &problem.var_map,
        model.lambda_spread,
        model.lambda_financing,
        x_prev,
    )
    .map_err(|source| BacktestError::Effective { step: t, source })?;
    let (constraint_forces, spread_force, financing_force) =
        row_forces(&solution, &problem.var_map, constraints);
    *warm = Some((solution.y.clone(), solution.active_set.clone()));
    Ok(SolvedStep {
        power_force: Array1::zeros(x_prev.len()),
        trade: solution.trade.clone(),
        kkt_residual: solution.kkt_residual,
        mults,
        constraint_forces,
        spread_force,
        financing_force,
    })
}

fn separable_step<T: Scalar>(
    t: usize,
    scenario: &Scenario<T>,
    q: &Array2<T>,
    p: &Array2<T>,
    x_prev: &Array1<T>,
    g_total: &Array1<T>,
    constraints: &[ConstraintSpec<T>],
) -> Result<SolvedStep<T>, BacktestError> {
    let model = &scenario.model;
    let n = model.n_assets;
    let mut trade = Array1::zeros(n);
    let mut mults = Vec::new();
    let mut constraint_forces = Array2::zeros((constraints.len(), n));
    let mut spread_force = Array1::zeros(n);
    let mut power_force = Array1::zeros(n);

    for i in 0..n {
        let step = SingleAssetStep {
            g: g_total[i],
            x_prev: x_prev[i],
            gamma_sigma2: p[[i, i]],
            lambda_quad: q[[i, i]] - p[[i, i]],
            lambda_spread: model.lambda_spread,
            lambda_fin: T::zero(),
            lambda_p32: model.lambda_power32,
        };
        // tightest trade interval from the per-asset bounds, remembering
        // which constraint supplied each end
        let mut lo = T::neg_infinity();
        let mut hi = T::infinity();
        let (mut lo_from, mut hi_from) = (None, None);
        for (ci, c) in constraints.iter().enumerate() {
            if c.v[i] == T::zero() {
                continue;
            }
            let shift = match c.kind {
                ConstraintKind::TradeBound => T::zero(),
                ConstraintKind::PositionBound => x_prev[i],
                _ => unreachable!("separable path accepts bounds only"),
            };
            if c.lower.is_finite() && c.lower - shift > lo {
                lo = c.lower - shift;
                lo_from = Some(ci);
            }
            if c.upper.is_finite() && c.upper - shift < hi {
                hi = c.upper - shift;
                hi_from = Some(ci);
            }
        }
        let r = solve_asset_step(&step, lo, hi)
            .map_err(|source| BacktestError::Separable { step: t, source })?;
        trade[i] = r.trade;

        if model.lambda_spread > T::zero() {
            let sgn = if r.trade > T::zero() {
                1i8
            } else if r.trade < T::zero() {
                -1i8
            } else {
                1i8
            };
            mults.push(AttributionMultiplier {
                constraint_label: format!("spread[{i}]"),
                classification: Classification::TradeLike,
                eta: r.eta_spread,
                bound_used: r.trade.abs(),
                lambda: model.lambda_spread,
                epsilon: sgn,
                v: basis(n, i),
                degenerate: false,
            });
        }
        if model.lambda_power32 > T::zero() {
            let sgn = if r.trade >= T::zero() { 1i8 } else { -1i8 };
            let marginal = T::of(1.5) * model.lambda_power32 * r.trade.abs().sqrt();
            mults.push(AttributionMultiplier {
                constraint_label: format!("power32[{i}]"),
                classification: Classification::TradeLike,
                eta: r.eta_p32,
                bound_used: r.trade.abs(),
                lambda: marginal,
                epsilon: sgn,
                v: basis(n, i),
                degenerate: false,
            });
            power_force[i] = -T::of(sgn as f64) * marginal;
        }
        if r.bound_side != 0 && r.bound_multiplier > T::zero() {
            let ci = if r.bound_side > 0 { hi_from } else { lo_from }
                .expect("a binding interval end comes from some constraint");
            let c = &constraints[ci];
            let bound = if r.bound_side > 0 { c.upper } else { c.lower };
            let eps = r.bound_side;
            let eta = if bound == T::zero() {
                T::infinity()
            } else {
                T::of(eps as f64) * r.bound_multiplier / (T::of(2.0) * bound)
            };
            if eta < T::zero() {
                return Err(BacktestError::Effective {
                    step: t,
                    source: EffectiveError::Classification {
                        label: c.label.clone(),
                        eta: format!("{eta}"),
                    },
                });
            }
            mults.push(AttributionMultiplier {
                constraint_label: c.label.clone(),
                classification: if c.kind == ConstraintKind::TradeBound {
                    Classification::TradeLike
                } else {
                    Classification::PositionLike
                },
                eta,
                bound_used: bound,
                lambda: r.bound_multiplier,
                epsilon: eps,
                v: basis(n, i),
                degenerate: false,
            });
            constraint_forces[[ci, i]] -= T::of(eps as f64) * r.bound_multiplier;
        }
        // whatever force the smooth terms and bounds leave over sits on
        // the spread kink's subgradient
        let bound_force = if r.bound_side != 0 {
            T::of(r.bound_side as f64) * r.bound_multiplier
        } else {
            T::zero()
        };
        if model.lambda_spread > T::zero() {
            let kappa = step.curvature();
            spread_force[i] = -(step.source() - kappa * r.trade + power_force[i] - bound_force);
        }
    }

    let em = effective_matrices(q, p, &mults);
    let kkt = verify_reconstruction(&em, x_prev, g_total, &trade);
    Ok(SolvedStep {
        trade,
        mults,
        kkt_residual: kkt,
        constraint_forces,
        spread_force,
        financing_force: Array1::zeros(n),
        power_force,
    })
}

/// Component layout for a run: signal names, then group names.
fn component_layout<T: Scalar>(
    scenario: &Scenario<T>,
    mode: Mode,
) -> (Vec<String>, Vec<usize>, usize) {
    let signal_names = scenario.signals.names.clone();
    let k = signal_names.len();
    let mut names = signal_names;
    let mut constraint_component = Vec::new();
    if mode == Mode::ConstraintPortfolios {
        for c in &scenario.constraints {
            let key = c.group.clone().unwrap_or_else(|| c.base.label.clone());
            let idx = match names[k..].iter().position(|n| *n == key) {
                Some(p) => k + p,
                None => {
                    names.push(key);
                    names.len() - 1
                }
            };
            constraint_component.push(idx);
        }
        if scenario.model.lambda_spread > T::zero() {
            names.push("spread".into());
        }
        if scenario.model.lambda_financing > T::zero() {
            names.push("financing".into());
        }
        if scenario.model.lambda_power32 > T::zero() {
            names.push("power32".into());
        }
    }
    (names, constraint_component, k)
}

/// Run the whole scenario, decomposing every step.
pub fn run_backtest<T: Scalar>(
    scenario: &Scenario<T>,
    options: &BacktestOptions<T>,
) -> Result<BacktestRun<T>, BacktestError> {
    scenario.validate()?;
    let model = &scenario.model;
    let n = model.n_assets;
    let (q, p) = build_static_matrices(model)?;

    let separable = model.lambda_power32 > T::zero();
    if separable {
        if model.lambda_financing > T::zero() {
            return Err(BacktestError::SeparableShape {
                reason: "no financing cost alongside it".into(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && q[[i, j]] != T::zero() {
                    return Err(BacktestError::SeparableShape {
                        reason: "a diagonal risk and cost model".into(),
                    });
                }
            }
        }
        for c in &scenario.constraints {
            if !matches!(c.base.kind, ConstraintKind::TradeBound | ConstraintKind::PositionBound) {
                return Err(BacktestError::SeparableShape {
                    reason: "per-asset bound constraints only".into(),
                });
            }
        }
    }

    let scaled;
    let signals = match &scenario.dynamic {
        Some(d) => {
            scaled = scale_signals_dynamic(&scenario.signals, d, model.gamma)?;
            &scaled
        }
        None => &scenario.signals,
    };
    let steps = signals.steps();

    let (names, constraint_component, n_signals) = component_layout(scenario, options.mode);
    let n_components = names.len();
    let mut history = AttributionHistory::new(options.mode, names, n_signals, steps, n);
    let mut diagnostics =
        RunDiagnostics { mode: options.mode, dynamic_scaled: scenario.dynamic.is_some(), steps: Vec::with_capacity(steps) };

    let lambda_mat = model.lambda_matrix();
    let mut x = Array1::<T>::zeros(n);
    let mut comp_x = Array2::<T>::zeros((n_components, n));
    let mut distortion = model.impact.as_ref().map(|_| Array1::<T>::zeros(n));
    let mut warm: Option<(Array1<T>, Vec<usize>)> = None;

    for t in 0..steps {
        let g_step = signals.g.index_axis(Axis(0), t);
        let g_total = signals.total_at(t);
        let constraints = match options.mode {
            Mode::Unconstrained => Vec::new(),
            _ => scenario.constraints_at(t),
        };

        let solved = if separable {
            separable_step(t, scenario, &q, &p, &x, &g_total, &constraints)?
        } else {
            dense_step(t, scenario, &q, &p, &x, &g_total, &constraints, options, &mut warm)?
        };

        // advance each component with the step's effective model
        let mut comp_trades = Array2::<T>::zeros((n_components, n));
        match options.mode {
            Mode::SignalWise | Mode::Unconstrained => {
                let em = effective_matrices(&q, &p, &solved.mults);
                for c in 0..n_components {
                    let source = g_step.row(c).to_owned();
                    let prev = comp_x.row(c).to_owned();
                    let tr = solve_effective_step(&em, &prev, &source)
                        .map_err(|source| BacktestError::Effective { step: t, source })?;
                    comp_trades.row_mut(c).assign(&tr);
                }
            }
            Mode::ConstraintPortfolios => {
                let em = effective_matrices(&q, &p, &[]);
                let mut sources = Array2::<T>::zeros((n_components, n));
                for c in 0..n_signals {
                    sources.row_mut(c).assign(&g_step.row(c));
                }
                for (ci, comp) in constraint_component.iter().enumerate() {
                    for i in 0..n {
                        sources[[*comp, i]] += solved.constraint_forces[[ci, i]];
                    }
                }
                for (name, force) in [
                    ("spread", &solved.spread_force),
                    ("financing", &solved.financing_force),
                    ("power32", &solved.power_force),
                ] {
                    if let Some(ci) =
                        history.component_names.iter().position(|nm| nm.as_str() == name)
                    {
                        for i in 0..n {
                            sources[[ci, i]] += force[i];
                        }
                    }
                }
                for c in 0..n_components {
                    let source = sources.row(c).to_owned();
                    let prev = comp_x.row(c).to_owned();
                    let tr = solve_effective_step(&em, &prev, &source)
                        .map_err(|source| BacktestError::Effective { step: t, source })?;
                    comp_trades.row_mut(c).assign(&tr);
                }
            }
        }

        // reconstruction check of the total against the effective equation
        let reconstruction_residual = match options.mode {
            Mode::ConstraintPortfolios => {
                let em = effective_matrices(&q, &p, &[]);
                let mut source = g_total.clone();
                for ci in 0..constraint_component.len() {
                    for i in 0..n {
                        source[i] += solved.constraint_forces[[ci, i]];
                    }
                }
                for i in 0..n {
                    source[i] += solved.spread_force[i]
                        + solved.financing_force[i]
                        + solved.power_force[i];
                }
                verify_reconstruction(&em, &x, &source, &solved.trade)
            }
            _ => {
                let em = effective_matrices(&q, &p, &solved.mults);
                verify_reconstruction(&em, &x, &g_total, &solved.trade)
            }
        };

        let x_new = &x + &solved.trade;
        let comp_x_new = &comp_x + &comp_trades;

        history.total_trade.row_mut(t).assign(&solved.trade);
        history.total_position.row_mut(t).assign(&x_new);
        history.trades.index_axis_mut(Axis(0), t).assign(&comp_trades);
        history.positions.index_axis_mut(Axis(0), t).assign(&comp_x_new);

        let returns = scenario.realized_returns.row(t).to_owned();
        history.pnl.row_mut(t).assign(&attribute_pnl(&comp_x_new, &returns));
        history.total_pnl[t] = x_new.dot(&returns);
        history
            .risk
            .row_mut(t)
            .assign(&attribute_risk(&comp_x_new, &x_new, &model.sigma));
        history.total_risk[t] = x_new.dot(&model.sigma.dot(&x_new));
        history
            .quad_cost
            .row_mut(t)
            .assign(&attribute_quadratic_cost(&comp_trades, &solved.trade, &lambda_mat));
        history.total_quad_cost[t] =
            T::of(0.5) * solved.trade.dot(&lambda_mat.dot(&solved.trade));
        history
            .spread_cost
            .row_mut(t)
            .assign(&attribute_spread_cost(&comp_trades, &solved.trade, model.lambda_spread));
        history.total_spread_cost[t] =
            model.lambda_spread * solved.trade.iter().fold(T::zero(), |a, v| a + v.abs());
        history
            .financing_cost
            .row_mut(t)
            .assign(&attribute_financing_cost(&comp_x_new, &x_new, model.lambda_financing));
        history.total_financing_cost[t] =
            model.lambda_financing * x_new.iter().fold(T::zero(), |a, v| a + v.abs());

        if let (Some(d), Some(impact)) = (&mut distortion, &model.impact) {
            *d = update_price_distortion(d, impact, &solved.trade);
        }

        x = x_new;
        comp_x = comp_x_new;

        diagnostics.steps.push(StepDiagnostics {
            time: t,
            active: active_records(&solved.mults),
            kkt_residual: solved.kkt_residual,
            reconstruction_residual,
            component_gap: history.component_sum_gap(t),
        });
    }

    Ok(BacktestRun { history, diagnostics, final_distortion: distortion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{generate_random, RandomSpec};

    fn run(spec: &RandomSpec, mode: Mode) -> BacktestRun<f64> {
        let sc = generate_random(spec);
        run_backtest(&sc, &BacktestOptions { mode, ..Default::default() }).unwrap()
    }

    #[test]
    fn unconstrained_components_track_the_total() {
        let mut spec = RandomSpec::new(3, 2, 25, 5);
        spec.lambda_spread = 0.01;
        let out = run(&spec, Mode::SignalWise);
        assert!(out.diagnostics.max_component_gap() < 1e-9);
        assert!(out.diagnostics.max_reconstruction_residual() < 1e-8);
    }

    #[test]
    fn bound_constraints_stay_respected() {
        let mut spec = RandomSpec::new(4, 2, 40, 9);
        spec.n_constraints = 3;
        let sc = generate_random(&spec);
        let out = run_backtest(&sc, &BacktestOptions::default()).unwrap();
        for t in 0..sc.steps() {
            for c in sc.constraints_at(t) {
                let x = out.history.total_position.row(t);
                let tr = out.history.total_trade.row(t);
                let mut val = c.v.dot(&tr);
                if !c.is_trade_side() {
                    val = c.v.dot(&x);
                }
                assert!(val <= c.upper + 1e-7, "step {t} violates {}", c.label);
                assert!(val >= c.lower - 1e-7, "step {t} violates {}", c.label);
            }
        }
        assert!(out.diagnostics.max_component_gap() < 1e-8);
    }

    #[test]
    fn grouped_mode_components_also_sum() {
        let mut spec = RandomSpec::new(3, 2, 30, 17);
        spec.n_constraints = 2;
        spec.lambda_spread = 0.02;
        spec.lambda_financing = 0.01;
        let out = run(&spec, Mode::ConstraintPortfolios);
        assert!(out.history.n_components() > out.history.n_signals);
        assert!(out.diagnostics.max_component_gap() < 1e-8);
    }

    #[test]
    fn grouped_and_signalwise_share_the_total_path() {
        let mut spec = RandomSpec::new(3, 2, 30, 23);
        spec.n_constraints = 2;
        spec.lambda_spread = 0.015;
        let a = run(&spec, Mode::SignalWise);
        let b = run(&spec, Mode::ConstraintPortfolios);
        for t in 0..30 {
            for i in 0..3 {
                assert!(
                    (a.history.total_position[[t, i]] - b.history.total_position[[t, i]]).abs()
                        < 1e-9
                );
            }
        }
    }

    #[test]
    fn separable_engine_handles_the_power_cost() {
        let mut spec = RandomSpec::new(3, 2, 25, 31);
        spec.lambda_power32 = 0.05;
        spec.lambda_spread = 0.01;
        spec.n_constraints = 2;
        let out = run(&spec, Mode::SignalWise);
        assert!(out.diagnostics.max_component_gap() < 1e-8);
        assert!(out.diagnostics.max_kkt_residual() < 1e-8);
    }

    #[test]
    fn power_cost_rejects_a_dense_risk_model() {
        let mut spec = RandomSpec::new(3, 1, 5, 3);
        spec.lambda_power32 = 0.1;
        let mut sc = generate_random(&spec);
        sc.model.sigma[[0, 1]] = 0.01;
        sc.model.sigma[[1, 0]] = 0.01;
        assert!(matches!(
            run_backtest(&sc, &BacktestOptions::default()),
            Err(BacktestError::SeparableShape { .. })
        ));
    }

    #[test]
    fn unconstrained_mode_ignores_user_constraints() {
        let mut spec = RandomSpec::new(2, 1, 15, 41);
        spec.n_constraints = 2;
        let sc = generate_random(&spec);
        let tight = run_backtest(
            &sc,
            &BacktestOptions { mode: Mode::Unconstrained, ..Default::default() },
        )
        .unwrap();
        let mut free_sc = sc.clone();
        free_sc.constraints.clear();
        let free = run_backtest(&free_sc, &BacktestOptions::default()).unwrap();
        for t in 0..15 {
            for i in 0..2 {
                assert!(
                    (tight.history.total_position[[t, i]]
                        - free.history.total_position[[t, i]])
                        .abs()
                        < 1e-10
                );
            }
        }
    }
}
