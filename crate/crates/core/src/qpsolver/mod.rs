//! Dense convex QP solver for the one-step trading problem.
//!
//! The maximization over trades is restated as minimization of
//! `½ yᵀH y + cᵀy` over inequality rows `a·y ≤ b`. When L1 costs are
//! present, auxiliary variables bound the absolute trade (`−s_i ≤ Δx_i ≤
//! s_i`) and the absolute end position (`−u_i ≤ x_prev,i + Δx_i ≤ u_i`),
//! turning the nonsmooth terms into linear costs on `s` and `u`. The
//! solver reports a Lagrange multiplier for every row; those are the raw
//! material for the attribution multipliers downstream.

pub mod active_set;

pub use active_set::{solve, solve_warm, SolverOptions};

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::model::MarketModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    TradeBound,
    PositionBound,
    TradeExposure,
    PositionExposure,
    /// Internal: row pair bounding |Δx_i| by the aux variable s_i.
    L1TradeAux,
    /// Internal: row pair bounding |x_prev,i + Δx_i| by the aux variable u_i.
    L1PositionAux,
}

/// A linear constraint on the trade or the end-of-step position.
///
/// Unbounded sides are expressed with `±∞`, which keeps interval
/// arithmetic straightforward.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec<T> {
    pub kind: ConstraintKind,
    pub v: Array1<T>,
    pub lower: T,
    pub upper: T,
    pub label: String,
}

impl<T: Scalar> ConstraintSpec<T> {
    fn basis(n: usize, asset: usize) -> Array1<T> {
        let mut v = Array1::zeros(n);
        v[asset] = T::one();
        v
    }

    pub fn trade_bound(n: usize, asset: usize, lower: T, upper: T, label: &str) -> Self {
        ConstraintSpec {
            kind: ConstraintKind::TradeBound,
            v: Self::basis(n, asset),
            lower,
            upper,
            label: label.to_string(),
        }
    }

    pub fn position_bound(n: usize, asset: usize, lower: T, upper: T, label: &str) -> Self {
        ConstraintSpec {
            kind: ConstraintKind::PositionBound,
            v: Self::basis(n, asset),
            lower,
            upper,
            label: label.to_string(),
        }
    }

    pub fn trade_exposure(v: Array1<T>, lower: T, upper: T, label: &str) -> Self {
        ConstraintSpec { kind: ConstraintKind::TradeExposure, v, lower, upper, label: label.to_string() }
    }

    pub fn position_exposure(v: Array1<T>, lower: T, upper: T, label: &str) -> Self {
        ConstraintSpec { kind: ConstraintKind::PositionExposure, v, lower, upper, label: label.to_string() }
    }

    /// Whether the constraint acts on the trade (true) or the end position.
    pub fn is_trade_side(&self) -> bool {
        matches!(
            self.kind,
            ConstraintKind::TradeBound | ConstraintKind::TradeExposure | ConstraintKind::L1TradeAux
        )
    }

    pub fn validate(&self, n: usize) -> Result<(), QpError> {
        if matches!(self.kind, ConstraintKind::L1TradeAux | ConstraintKind::L1PositionAux) {
            return Err(QpError::InvalidProblem {
                reason: format!("constraint '{}' uses a reserved internal kind", self.label),
            });
        }
        if self.v.len() != n {
            return Err(QpError::InvalidProblem {
                reason: format!("constraint '{}' direction has length {}, expected {n}", self.label, self.v.len()),
            });
        }
        let norm: T = self.v.iter().fold(T::zero(), |a, x| a.max(x.abs()));
        if norm == T::zero() || self.v.iter().any(|x| !x.is_finite()) {
            return Err(QpError::InvalidProblem {
                reason: format!("constraint '{}' direction must be nonzero and finite", self.label),
            });
        }
        if matches!(self.kind, ConstraintKind::TradeBound | ConstraintKind::PositionBound) {
            let nonzero = self.v.iter().filter(|x| **x != T::zero()).count();
            let unit = self.v.iter().all(|x| *x == T::zero() || *x == T::one());
            if nonzero != 1 || !unit {
                return Err(QpError::InvalidProblem {
                    reason: format!("bound constraint '{}' must use a standard basis direction", self.label),
                });
            }
        }
        if self.lower > self.upper {
            return Err(QpError::ConflictingBounds { label: self.label.clone() });
        }
        if self.lower == T::neg_infinity() && self.upper == T::infinity() {
            return Err(QpError::InvalidProblem {
                reason: format!("constraint '{}' has no finite bound", self.label),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Trade(usize),
    SpreadAux(usize),
    FinancingAux(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Lower,
}

/// Provenance of an inequality row, for multiplier lookup after the solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    SpreadUpper(usize),
    SpreadLower(usize),
    FinancingUpper(usize),
    FinancingLower(usize),
    User { constraint: usize, side: Side },
    /// Row of a hand-built problem with no tracked origin.
    Opaque,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarMap {
    pub vars: Vec<VarKind>,
    pub rows: Vec<RowSource>,
    pub n_assets: usize,
}

impl VarMap {
    /// Index of the spread aux variable for asset `i`, if present.
    pub fn spread_var(&self, i: usize) -> Option<usize> {
        self.vars.iter().position(|v| *v == VarKind::SpreadAux(i))
    }

    pub fn financing_var(&self, i: usize) -> Option<usize> {
        self.vars.iter().position(|v| *v == VarKind::FinancingAux(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T> {
    pub h: Array2<T>,
    pub c: Array1<T>,
    /// Inequality rows `a · y ≤ b`.
    pub rows: Vec<(Array1<T>, T)>,
    pub var_map: VarMap,
    pub lambda_spread: T,
    pub lambda_financing: T,
}

impl<T: Scalar> QpProblem<T> {
    /// Wrap a bare `(H, c, rows)` triple; every variable is treated as a
    /// trade coordinate. Mostly useful in tests and one-off solves.
    pub fn raw(h: Array2<T>, c: Array1<T>, rows: Vec<(Array1<T>, T)>) -> Self {
        let n = h.nrows();
        let sources = vec![RowSource::Opaque; rows.len()];
        QpProblem {
            h,
            c,
            rows,
            var_map: VarMap { vars: (0..n).map(VarKind::Trade).collect(), rows: sources, n_assets: n },
            lambda_spread: T::zero(),
            lambda_financing: T::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub y: Array1<T>,
    /// Trade coordinates extracted from `y`.
    pub trade: Array1<T>,
    /// One multiplier per row, zero for inactive rows.
    pub multipliers: Vec<T>,
    pub active_set: Vec<usize>,
    pub kkt_residual: T,
    /// Minimization objective `½ yᵀHy + cᵀy`; negate for the trading
    /// objective being maximized.
    pub objective: T,
}

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("constraint '{label}' has lower bound above upper bound")]
    ConflictingBounds { label: String },
    #[error("invalid problem: {reason}")]
    InvalidProblem { reason: String },
    #[error("no feasible point satisfies the constraint rows")]
    Infeasible,
    #[error("iteration limit {limit} reached")]
    MaxIterations { limit: usize },
    #[error("numerical breakdown: {what}")]
    NumericalBreakdown { what: String },
}

/// Build the minimization problem for one step.
///
/// Row order is fixed: spread aux pairs (upper then lower per asset),
/// financing aux pairs, then user constraint rows in input order (upper
/// side first). Position rows are shifted by `v·x_prev` so everything is
/// linear in the trade.
pub fn assemble_problem<T: Scalar>(
    model: &MarketModel<T>,
    q: &Array2<T>,
    p: &Array2<T>,
    x_prev: &Array1<T>,
    g_total: &Array1<T>,
    constraints: &[ConstraintSpec<T>],
) -> Result<QpProblem<T>, QpError> {
    let n = model.n_assets;
    if x_prev.len() != n || g_total.len() != n || q.nrows() != n || p.nrows() != n {
        return Err(QpError::InvalidProblem {
            reason: format!("dimension mismatch assembling an n={n} problem"),
        });
    }
    for spec in constraints {
        spec.validate(n)?;
    }
    let with_spread = model.lambda_spread > T::zero();
    let with_fin = model.lambda_financing > T::zero();
    let mut vars: Vec<VarKind> = (0..n).map(VarKind::Trade).collect();
    if with_spread {
        vars.extend((0..n).map(VarKind::SpreadAux));
    }
    if with_fin {
        vars.extend((0..n).map(VarKind::FinancingAux));
    }
    let m = vars.len();

    let mut h = Array2::zeros((m, m));
    for i in 0..n {
        for j in 0..n {
            h[[i, j]] = q[[i, j]];
        }
    }
    let mut c = Array1::zeros(m);
    let px = p.dot(x_prev);
    for i in 0..n {
        c[i] = px[i] - g_total[i];
    }
    for (vi, kind) in vars.iter().enumerate() {
        match kind {
            VarKind::SpreadAux(_) => c[vi] = model.lambda_spread,
            VarKind::FinancingAux(_) => c[vi] = model.lambda_financing,
            VarKind::Trade(_) => {}
        }
    }

    let mut rows: Vec<(Array1<T>, T)> = Vec::new();
    let mut sources: Vec<RowSource> = Vec::new();
    if with_spread {
        for i in 0..n {
            let aux = n + i;
            let mut a = Array1::zeros(m);
            a[i] = T::one();
            a[aux] = -T::one();
            rows.push((a, T::zero()));
            sources.push(RowSource::SpreadUpper(i));
            let mut a = Array1::zeros(m);
            a[i] = -T::one();
            a[aux] = -T::one();
            rows.push((a, T::zero()));
            sources.push(RowSource::SpreadLower(i));
        }
    }
    if with_fin {
        let base = if with_spread { 2 * n } else { n };
        for i in 0..n {
            let aux = base + i;
            let mut a = Array1::zeros(m);
            a[i] = T::one();
            a[aux] = -T::one();
            rows.push((a, -x_prev[i]));
            sources.push(RowSource::FinancingUpper(i));
            let mut a = Array1::zeros(m);
            a[i] = -T::one();
            a[aux] = -T::one();
            rows.push((a, x_prev[i]));
            sources.push(RowSource::FinancingLower(i));
        }
    }
    for (ci, spec) in constraints.iter().enumerate() {
        let shift = if spec.is_trade_side() { T::zero() } else { spec.v.dot(x_prev) };
        if spec.upper < T::infinity() {
            let mut a = Array1::zeros(m);
            for i in 0..n {
                a[i] = spec.v[i];
            }
            rows.push((a, spec.upper - shift));
            sources.push(RowSource::User { constraint: ci, side: Side::Upper });
        }
        if spec.lower > T::neg_infinity() {
            let mut a = Array1::zeros(m);
            for i in 0..n {
                a[i] = -spec.v[i];
            }
            rows.push((a, shift - spec.lower));
            sources.push(RowSource::User { constraint: ci, side: Side::Lower });
        }
    }

    Ok(QpProblem {
        h,
        c,
        rows,
        var_map: VarMap { vars, rows: sources, n_assets: n },
        lambda_spread: model.lambda_spread,
        lambda_financing: model.lambda_financing,
    })
}

/// Worst KKT violation of a candidate solution: max over stationarity,
/// primal feasibility, dual feasibility, and complementary slackness.
pub fn kkt_residual<T: Scalar>(
    problem: &QpProblem<T>,
    solution: &QpSolution<T>,
) -> Result<T, QpError> {
    let hscale = problem.h.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if hscale == T::zero() {
        return Err(QpError::InvalidProblem {
            reason: "zero quadratic term; the objective is unbounded or trivial".into(),
        });
    }
    if solution.multipliers.len() != problem.rows.len() {
        return Err(QpError::InvalidProblem { reason: "multiplier count mismatch".into() });
    }
    let mut grad = problem.h.dot(&solution.y) + &problem.c;
    let mut worst = T::zero();
    for ((a, b), lam) in problem.rows.iter().zip(&solution.multipliers) {
        let slack = *b - a.dot(&solution.y);
        worst = worst.max(-slack); // primal violation
        worst = worst.max(-*lam); // dual violation
        worst = worst.max((*lam * slack).abs()); // complementarity
        for i in 0..grad.len() {
            grad[i] += *lam * a[i];
        }
    }
    for v in grad.iter() {
        worst = worst.max(v.abs());
    }
    Ok(worst)
}
