//! Decomposition of a backtested portfolio into additive components.
//!
//! Components are signal portfolios, plus constraint-group portfolios in
//! grouped mode. At every step the component trades sum to the optimizer's
//! trade exactly, so pnl, risk and cost splits are decompositions of the
//! realized totals rather than approximations.

pub mod backtest;

use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

use crate::model::Impact;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Constraints folded into effective matrices; components = signals.
    SignalWise,
    /// Signals tracked with the original matrices; binding constraints and
    /// kinked costs become components of their own.
    ConstraintPortfolios,
    /// User constraints dropped (model costs kept); components = signals.
    Unconstrained,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SignalWise => "signalwise",
            Mode::ConstraintPortfolios => "constraint-portfolios",
            Mode::Unconstrained => "unconstrained",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("zero-norm {what} in transfer coefficient")]
    ZeroNorm { what: &'static str },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: &'static str },
}

/// Per-step, per-component record of a full run.
///
/// Component axis: signals first (`n_signals` of them), then constraint
/// groups in grouped mode. `trades[[t, c, i]]` is component c's trade in
/// asset i at step t; the `total_*` fields hold the optimizer's own path
/// so the decomposition can always be checked against it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionHistory<T> {
    pub mode: Mode,
    pub component_names: Vec<String>,
    pub n_signals: usize,
    pub trades: Array3<T>,
    pub positions: Array3<T>,
    pub total_trade: Array2<T>,
    pub total_position: Array2<T>,
    pub pnl: Array2<T>,
    pub risk: Array2<T>,
    pub quad_cost: Array2<T>,
    pub spread_cost: Array2<T>,
    pub financing_cost: Array2<T>,
    pub total_pnl: Array1<T>,
    pub total_risk: Array1<T>,
    pub total_quad_cost: Array1<T>,
    pub total_spread_cost: Array1<T>,
    pub total_financing_cost: Array1<T>,
}

impl<T: Scalar> AttributionHistory<T> {
    pub fn new(mode: Mode, component_names: Vec<String>, n_signals: usize, steps: usize, n_assets: usize) -> Self {
        let c = component_names.len();
        AttributionHistory {
            mode,
            component_names,
            n_signals,
            trades: Array3::zeros((steps, c, n_assets)),
            positions: Array3::zeros((steps, c, n_assets)),
            total_trade: Array2::zeros((steps, n_assets)),
            total_position: Array2::zeros((steps, n_assets)),
            pnl: Array2::zeros((steps, c)),
            risk: Array2::zeros((steps, c)),
            quad_cost: Array2::zeros((steps, c)),
            spread_cost: Array2::zeros((steps, c)),
            financing_cost: Array2::zeros((steps, c)),
            total_pnl: Array1::zeros(steps),
            total_risk: Array1::zeros(steps),
            total_quad_cost: Array1::zeros(steps),
            total_spread_cost: Array1::zeros(steps),
            total_financing_cost: Array1::zeros(steps),
        }
    }

    pub fn steps(&self) -> usize {
        self.total_trade.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.component_names.len()
    }

    pub fn n_assets(&self) -> usize {
        self.total_trade.ncols()
    }

    /// Largest gap at step `t` between the component sum and the recorded
    /// total, across trades and positions.
    pub fn component_sum_gap(&self, t: usize) -> T {
        let mut worst = T::zero();
        for i in 0..self.n_assets() {
            let (mut st, mut sp) = (T::zero(), T::zero());
            for c in 0..self.n_components() {
                st += self.trades[[t, c, i]];
                sp += self.positions[[t, c, i]];
            }
            worst = worst
                .max((st - self.total_trade[[t, i]]).abs())
                .max((sp - self.total_position[[t, i]]).abs());
        }
        worst
    }

    /// Sum of a per-step per-component field over time.
    pub fn column_totals(field: &Array2<T>) -> Array1<T> {
        let mut out = Array1::zeros(field.ncols());
        for row in field.rows() {
            for (c, v) in row.iter().enumerate() {
                out[c] += *v;
            }
        }
        out
    }
}

/// Each component's share of the risk `x'Σx`: covariance of the component
/// position with the total. Shares sum to the total exactly.
pub fn attribute_risk<T: Scalar>(
    per_component: &Array2<T>,
    total: &Array1<T>,
    sigma: &Array2<T>,
) -> Array1<T> {
    let sx = sigma.dot(total);
    per_component.dot(&sx)
}

/// Each component's share of the quadratic trading cost `½ Δx'ΛΔx`.
pub fn attribute_quadratic_cost<T: Scalar>(
    per_component: &Array2<T>,
    total: &Array1<T>,
    lambda: &Array2<T>,
) -> Array1<T> {
    let lx = lambda.dot(total);
    per_component.dot(&lx).mapv(|v| v * T::of(0.5))
}

/// Each component's share of the spread cost `λ₀ Σ|Δx_i|`, split by the
/// sign of the total trade (a zero total contributes nothing).
pub fn attribute_spread_cost<T: Scalar>(
    per_component: &Array2<T>,
    total: &Array1<T>,
    lambda_spread: T,
) -> Array1<T> {
    signed_share(per_component, total, lambda_spread)
}

/// Each component's share of the financing cost `λ_l Σ|x_i|`, split by the
/// sign of the total position.
pub fn attribute_financing_cost<T: Scalar>(
    per_component: &Array2<T>,
    total: &Array1<T>,
    lambda_financing: T,
) -> Array1<T> {
    signed_share(per_component, total, lambda_financing)
}

fn signed_share<T: Scalar>(per_component: &Array2<T>, total: &Array1<T>, lambda: T) -> Array1<T> {
    let signs = total.mapv(|v| {
        if v > T::zero() {
            lambda
        } else if v < T::zero() {
            -lambda
        } else {
            T::zero()
        }
    });
    per_component.dot(&signs)
}

/// Each component's pnl over one step: position times realized return.
pub fn attribute_pnl<T: Scalar>(per_component: &Array2<T>, returns: &Array1<T>) -> Array1<T> {
    per_component.dot(returns)
}

/// Risk-metric correlation of two position paths:
/// `Σ_t a'Σb / sqrt(Σ_t a'Σa · Σ_t b'Σb)`.
pub fn transfer_coefficient<T: Scalar>(
    path_a: &Array2<T>,
    path_b: &Array2<T>,
    sigma: &Array2<T>,
) -> Result<T, AttributionError> {
    if path_a.shape() != path_b.shape() {
        return Err(AttributionError::DimensionMismatch { context: "position paths" });
    }
    let (mut num, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
    for t in 0..path_a.nrows() {
        let a = path_a.row(t);
        let b = path_b.row(t);
        let sa = sigma.dot(&a);
        let sb = sigma.dot(&b);
        num += a.dot(&sb);
        aa += a.dot(&sa);
        bb += b.dot(&sb);
    }
    if aa <= T::zero() {
        return Err(AttributionError::ZeroNorm { what: "first path" });
    }
    if bb <= T::zero() {
        return Err(AttributionError::ZeroNorm { what: "second path" });
    }
    Ok(num / (aa * bb).sqrt())
}

/// Transfer coefficients of a constrained run against its unconstrained
/// reference, per signal and for the total book.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport<T> {
    pub per_signal: Vec<(String, T)>,
    pub total: T,
}

pub fn transfer_report<T: Scalar>(
    constrained: &AttributionHistory<T>,
    unconstrained: &AttributionHistory<T>,
    sigma: &Array2<T>,
) -> Result<TransferReport<T>, AttributionError> {
    if constrained.n_signals != unconstrained.n_signals
        || constrained.steps() != unconstrained.steps()
        || constrained.n_assets() != unconstrained.n_assets()
    {
        return Err(AttributionError::DimensionMismatch { context: "run shapes" });
    }
    let mut per_signal = Vec::with_capacity(constrained.n_signals);
    for k in 0..constrained.n_signals {
        let a = constrained.positions.index_axis(ndarray::Axis(1), k).to_owned();
        let b = unconstrained.positions.index_axis(ndarray::Axis(1), k).to_owned();
        let tc = transfer_coefficient(&a, &b, sigma)?;
        per_signal.push((constrained.component_names[k].clone(), tc));
    }
    let total = transfer_coefficient(
        &constrained.total_position,
        &unconstrained.total_position,
        sigma,
    )?;
    Ok(TransferReport { per_signal, total })
}

/// One step of the price-distortion state: absorb the trade, then decay.
/// `d⁺ = (I − decay)(d + gain Δx)`.
pub fn update_price_distortion<T: Scalar>(
    d: &Array1<T>,
    impact: &Impact<T>,
    trade: &Array1<T>,
) -> Array1<T> {
    let bumped = d + &impact.gain.dot(trade);
    let n = d.len();
    let mut out = bumped.clone();
    for i in 0..n {
        let mut dec = T::zero();
        for j in 0..n {
            dec += impact.decay[[i, j]] * bumped[j];
        }
        out[i] -= dec;
    }
    out
}
