//! Brute-force reference solver for small instances.
//!
//! Evaluates the exact nonsmooth objective on a shrinking grid, with no
//! knowledge of the active-set machinery, effective matrices, or kink
//! stiffnesses. Useful only for a handful of assets, which is the point:
//! it disagrees with the fast path only when the fast path is wrong.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::model::{build_static_matrices, MarketModel, ModelError};
use crate::qpsolver::ConstraintSpec;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec<T> {
    /// Half width of the initial search box, centered on zero trade.
    pub half_width: T,
    /// Grid points per dimension on every pass; odd keeps zero on the grid.
    pub coarse_points: usize,
    /// Passes that shrink the box around the incumbent by 10x.
    pub refinements: usize,
}

impl<T: Scalar> Default for OracleSpec<T> {
    fn default() -> Self {
        OracleSpec { half_width: T::of(3.0), coarse_points: 41, refinements: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    pub trade: Array1<T>,
    pub objective: T,
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("model rejected: {0}")]
    Model(#[from] ModelError),
    #[error("grid search supports at most 4 assets, got {n}")]
    TooManyAssets { n: usize },
    #[error("no feasible grid point in the search box")]
    NoFeasiblePoint,
    #[error("invalid search spec: {reason}")]
    BadSpec { reason: String },
}

/// Exact objective value at a trade, every cost term included.
pub fn oracle_objective<T: Scalar>(
    model: &MarketModel<T>,
    q: &Array2<T>,
    p: &Array2<T>,
    x_prev: &Array1<T>,
    g_total: &Array1<T>,
    trade: &Array1<T>,
) -> T {
    let n = trade.len();
    let half = T::of(0.5);
    let mut value = T::zero();
    for i in 0..n {
        let mut quad = T::zero();
        for j in 0..n {
            quad += q[[i, j]] * trade[j];
        }
        let mut prev = T::zero();
        for j in 0..n {
            prev += p[[i, j]] * x_prev[j];
        }
        value += trade[i] * (g_total[i] - half * quad - prev);
        value -= model.lambda_spread * trade[i].abs();
        value -= model.lambda_financing * (x_prev[i] + trade[i]).abs();
        value -= model.lambda_power32 * trade[i].abs().powf(T::of(1.5));
    }
    value
}

fn feasible<T: Scalar>(
    constraints: &[ConstraintSpec<T>],
    x_prev: &Array1<T>,
    trade: &Array1<T>,
) -> bool {
    for c in constraints {
        let mut val = c.v.dot(trade);
        if !c.is_trade_side() {
            val += c.v.dot(x_prev);
        }
        let tol = T::of(1e-9);
        if c.upper.is_finite() && val > c.upper + tol * T::one().max(c.upper.abs()) {
            return false;
        }
        if c.lower.is_finite() && val < c.lower - tol * T::one().max(c.lower.abs()) {
            return false;
        }
    }
    true
}

/// Grid-search the constrained optimum.
///
/// Each pass lays `coarse_points` per dimension over the current box,
/// keeps the best feasible point, then shrinks the box to incumbent
/// ± 2 steps with a 10x finer grid. An incumbent on the box edge
/// recenters the same pass instead of shrinking; that walks the box along
/// ill-conditioned valleys (and out of a too-small `half_width`) until the
/// optimum is interior.
pub fn oracle_solve<T: Scalar>(
    model: &MarketModel<T>,
    x_prev: &Array1<T>,
    g_total: &Array1<T>,
    constraints: &[ConstraintSpec<T>],
    spec: &OracleSpec<T>,
) -> Result<OracleResult<T>, OracleError> {
    let n = model.n_assets;
    if n > 4 {
        return Err(OracleError::TooManyAssets { n });
    }
    if spec.coarse_points < 3 || spec.coarse_points % 2 == 0 {
        return Err(OracleError::BadSpec { reason: "coarse_points must be odd and >= 3".into() });
    }
    if !(spec.half_width > T::zero()) {
        return Err(OracleError::BadSpec { reason: "half_width must be positive".into() });
    }
    let (q, p) = build_static_matrices(model)?;

    let mut center = Array1::<T>::zeros(n);
    let mut hw = spec.half_width;
    let points = spec.coarse_points;
    let mut recenters = 0;
    let mut pass = 0;
    let mut best: Option<(Array1<T>, T)> = None;
    while pass <= spec.refinements {
        let step = T::of(2.0) * hw / T::of((points - 1) as f64);
        let mut incumbent: Option<(Vec<usize>, Array1<T>, T)> = None;
        let mut idx = vec![0usize; n];
        let mut point = Array1::<T>::zeros(n);
        loop {
            for d in 0..n {
                point[d] = center[d] - hw + step * T::of(idx[d] as f64);
            }
            if feasible(constraints, x_prev, &point) {
                let value = oracle_objective(model, &q, &p, x_prev, g_total, &point);
                if incumbent.as_ref().map_or(true, |(_, _, b)| value > *b) {
                    incumbent = Some((idx.clone(), point.clone(), value));
                }
            }
            let mut d = 0;
            loop {
                if d == n {
                    break;
                }
                idx[d] += 1;
                if idx[d] < points {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == n {
                break;
            }
        }
        let (at, trade, value) = incumbent.ok_or(OracleError::NoFeasiblePoint)?;
        let on_edge = at.iter().any(|&i| i == 0 || i == points - 1);
        if on_edge && recenters < 40 {
            center = trade;
            recenters += 1;
            continue;
        }
        best = Some((trade.clone(), value));
        center = trade;
        hw = T::of(2.0) * step;
        pass += 1;
    }
    let (trade, objective) = best.expect("at least one pass ran");
    Ok(OracleResult { trade, objective })
}
