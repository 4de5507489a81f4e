//! Market model and signal containers, plus assembly of the quadratic
//! objective matrices.
//!
//! Positions are denominated in currency and returns are fractional, so
//! risk terms come out in currency² and every cost scalar is per unit of
//! currency traded or held. The one-step objective uses `Q = Λ + γΣ` on
//! trades and `P = γΣ` coupling trades to the previous position.

use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

use crate::linalg;
use crate::scalar::Scalar;

/// Quadratic trading-cost matrix: either `λΣ` (risk-proportional) or an
/// explicit PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum QuadCost<T> {
    Proportional(T),
    Matrix(Array2<T>),
}

/// Persistent price-impact parameters: distortion decays by `I − decay`
/// and each trade adds `gain · Δx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Impact<T> {
    pub decay: Array2<T>,
    pub gain: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel<T> {
    pub n_assets: usize,
    /// Per-period return covariance, n x n.
    pub sigma: Array2<T>,
    /// Risk aversion, 1/currency.
    pub gamma: T,
    pub quad_cost: QuadCost<T>,
    /// L1 cost per unit trade.
    pub lambda_spread: T,
    /// L1 cost per unit position held over a period.
    pub lambda_financing: T,
    /// Coefficient of the |Δx|^{3/2} cost term.
    pub lambda_power32: T,
    pub impact: Option<Impact<T>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sigma must be {expected}x{expected}, got {rows}x{cols}")]
    SigmaShape { expected: usize, rows: usize, cols: usize },
    #[error("{name} is not symmetric (max asymmetry {dev})")]
    NotSymmetric { name: &'static str, dev: String },
    #[error("{name} is not positive semidefinite (min eigenvalue {min_eig})")]
    NotPsd { name: &'static str, min_eig: String },
    #[error("gamma must be positive, got {0}")]
    BadGamma(String),
    #[error("{name} must be nonnegative, got {value}")]
    NegativeCost { name: &'static str, value: String },
    #[error("impact matrices must be {expected}x{expected}")]
    ImpactShape { expected: usize },
    #[error("signal dimension mismatch: {context} expects {expected}, got {got}")]
    DimensionMismatch { context: &'static str, expected: usize, got: usize },
    #[error("dynamic scaling factor 1 + phi*a/gamma must be positive for signal {signal}")]
    BadDynamicScale { signal: usize },
    #[error("sigma is singular, cannot form the aim position")]
    SingularSigma,
}

fn check_sym_psd<T: Scalar>(m: &Array2<T>, name: &'static str) -> Result<(), ModelError> {
    let scale = m.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let dev = linalg::asymmetry(m);
    if dev > scale * T::of(1e-12) {
        return Err(ModelError::NotSymmetric { name, dev: format!("{dev}") });
    }
    let eig = linalg::sym_eigenvalues(m);
    let min_eig = eig[0];
    let max_eig = eig[eig.len() - 1].abs();
    if min_eig < -T::of(1e-10) * max_eig {
        return Err(ModelError::NotPsd { name, min_eig: format!("{min_eig}") });
    }
    Ok(())
}

impl<T: Scalar> MarketModel<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.n_assets;
        if self.sigma.nrows() != n || self.sigma.ncols() != n {
            return Err(ModelError::SigmaShape {
                expected: n,
                rows: self.sigma.nrows(),
                cols: self.sigma.ncols(),
            });
        }
        check_sym_psd(&self.sigma, "sigma")?;
        if !(self.gamma > T::zero()) {
            return Err(ModelError::BadGamma(format!("{}", self.gamma)));
        }
        let costs = [
            ("lambda_spread", self.lambda_spread),
            ("lambda_financing", self.lambda_financing),
            ("lambda_power32", self.lambda_power32),
        ];
        for (name, v) in costs {
            if v < T::zero() || !v.is_finite() {
                return Err(ModelError::NegativeCost { name, value: format!("{v}") });
            }
        }
        match &self.quad_cost {
            QuadCost::Proportional(l) => {
                if *l < T::zero() || !l.is_finite() {
                    return Err(ModelError::NegativeCost {
                        name: "lambda_quad",
                        value: format!("{l}"),
                    });
                }
            }
            QuadCost::Matrix(m) => {
                if m.nrows() != n || m.ncols() != n {
                    return Err(ModelError::SigmaShape { expected: n, rows: m.nrows(), cols: m.ncols() });
                }
                check_sym_psd(m, "lambda_quad")?;
            }
        }
        if let Some(impact) = &self.impact {
            if impact.decay.nrows() != n
                || impact.decay.ncols() != n
                || impact.gain.nrows() != n
                || impact.gain.ncols() != n
            {
                return Err(ModelError::ImpactShape { expected: n });
            }
        }
        Ok(())
    }

    /// The quadratic-cost matrix Λ as a dense matrix.
    pub fn lambda_matrix(&self) -> Array2<T> {
        match &self.quad_cost {
            QuadCost::Proportional(l) => self.sigma.mapv(|v| v * *l),
            QuadCost::Matrix(m) => m.clone(),
        }
    }
}

/// Per-signal mean-reversion speeds and the value-function coefficient of
/// the one-step dynamic model.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicModelParams<T> {
    pub phi: Array1<T>,
    pub a: T,
}

/// Per-asset expected-return components for each signal over time.
///
/// `g` is indexed `[t, k, i]`: step, signal, asset.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSet<T> {
    pub names: Vec<String>,
    pub g: Array3<T>,
}

impl<T: Scalar> SignalSet<T> {
    pub fn k_signals(&self) -> usize {
        self.names.len()
    }

    pub fn steps(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn n_assets(&self) -> usize {
        self.g.shape()[2]
    }

    /// Total prediction G_t across signals at one step.
    pub fn total_at(&self, t: usize) -> Array1<T> {
        let n = self.n_assets();
        let mut out = Array1::zeros(n);
        for k in 0..self.k_signals() {
            for i in 0..n {
                out[i] += self.g[[t, k, i]];
            }
        }
        out
    }
}

/// Current position plus its per-signal components, optionally with the
/// matching price-distortion state.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioState<T> {
    pub x: Array1<T>,
    pub per_signal_x: Array2<T>,
    pub d: Option<Array1<T>>,
    pub per_signal_d: Option<Array2<T>>,
}

impl<T: Scalar> PortfolioState<T> {
    pub fn zero(k_signals: usize, n_assets: usize) -> Self {
        PortfolioState {
            x: Array1::zeros(n_assets),
            per_signal_x: Array2::zeros((k_signals, n_assets)),
            d: None,
            per_signal_d: None,
        }
    }

    pub fn zero_with_distortion(k_signals: usize, n_assets: usize) -> Self {
        PortfolioState {
            d: Some(Array1::zeros(n_assets)),
            per_signal_d: Some(Array2::zeros((k_signals, n_assets))),
            ..Self::zero(k_signals, n_assets)
        }
    }

    /// Largest deviation of the component sum from the total position.
    pub fn component_gap(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.x.len() {
            let mut s = T::zero();
            for k in 0..self.per_signal_x.nrows() {
                s += self.per_signal_x[[k, i]];
            }
            worst = worst.max((s - self.x[i]).abs());
        }
        worst
    }
}

/// Objective matrices of the one-step problem: `Q = Λ + γΣ`, `P = γΣ`.
pub fn build_static_matrices<T: Scalar>(
    model: &MarketModel<T>,
) -> Result<(Array2<T>, Array2<T>), ModelError> {
    model.validate()?;
    let p = model.sigma.mapv(|v| v * model.gamma);
    let q = &model.lambda_matrix() + &p;
    Ok((q, p))
}

/// Shrink each signal toward zero by its one-step dynamic factor:
/// `ĝ_k = g_k / (1 + φ_k a / γ)`. With `a = 0` (or `φ_k = 0`) the static
/// signals come back unchanged.
pub fn scale_signals_dynamic<T: Scalar>(
    signals: &SignalSet<T>,
    params: &DynamicModelParams<T>,
    gamma: T,
) -> Result<SignalSet<T>, ModelError> {
    let k = signals.k_signals();
    if params.phi.len() != k {
        return Err(ModelError::DimensionMismatch {
            context: "dynamic phi",
            expected: k,
            got: params.phi.len(),
        });
    }
    let mut g = signals.g.clone();
    for (ki, phi) in params.phi.iter().enumerate() {
        let denom = T::one() + *phi * params.a / gamma;
        if !(denom > T::zero()) {
            return Err(ModelError::BadDynamicScale { signal: ki });
        }
        for t in 0..signals.steps() {
            for i in 0..signals.n_assets() {
                g[[t, ki, i]] /= denom;
            }
        }
    }
    Ok(SignalSet { names: signals.names.clone(), g })
}

/// Cost-free target position `(γΣ)⁻¹ G`.
pub fn markowitz_aim<T: Scalar>(
    g_total: &Array1<T>,
    model: &MarketModel<T>,
) -> Result<Array1<T>, ModelError> {
    let gs = model.sigma.mapv(|v| v * model.gamma);
    linalg::solve(&gs, g_total).ok_or(ModelError::SingularSigma)
}
