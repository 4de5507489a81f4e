//! Constrained portfolio optimization with exact signal-wise attribution.
//!
//! The engine solves a one-step trading problem (quadratic risk and cost,
//! L1 spread and financing costs, optional |Δx|^{3/2} cost, linear
//! trade/position constraints), converts every binding constraint and kink
//! into an equivalent quadratic cost or risk term, and uses the resulting
//! effective matrices to split trades, positions, pnl, risk, and costs
//! exactly across the predictive signals that drive them.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the crate root exports `f64` aliases for the main entry types.

pub mod attribution;
pub mod closedform;
pub mod effective;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod qpsolver;
pub mod scalar;
pub mod scenarios;

pub use scalar::Scalar;

/// `f64` aliases for the common entry points.
pub type MarketModelF64 = model::MarketModel<f64>;
pub type SignalSetF64 = model::SignalSet<f64>;
pub type PortfolioStateF64 = model::PortfolioState<f64>;
pub type ConstraintSpecF64 = qpsolver::ConstraintSpec<f64>;
pub type QpProblemF64 = qpsolver::QpProblem<f64>;
pub type QpSolutionF64 = qpsolver::QpSolution<f64>;
pub type ScenarioF64 = scenarios::Scenario<f64>;
pub type AttributionHistoryF64 = attribution::AttributionHistory<f64>;
pub type BacktestRunF64 = attribution::backtest::BacktestRun<f64>;
