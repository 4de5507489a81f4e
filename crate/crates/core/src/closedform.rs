//! One-asset analytics for the static model.
//!
//! With a single asset every cost term has a closed form or a monotone
//! scalar equation: the spread cost induces a no-trade band, the financing
//! cost a position-cutting band, and the |Δx|^{3/2} cost an effective
//! quadratic coefficient found by bisection. These double as independent
//! oracles for the dense path and as the per-asset engine for separable
//! problems (diagonal risk, per-asset constraints).

use thiserror::Error;

use crate::scalar::Scalar;

/// Inputs of a single-asset step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleAssetStep<T> {
    /// Total expected-return signal G.
    pub g: T,
    pub x_prev: T,
    /// γσ², the risk curvature.
    pub gamma_sigma2: T,
    /// Quadratic cost coefficient λ (so curvature is γσ² + λ).
    pub lambda_quad: T,
    pub lambda_spread: T,
    pub lambda_fin: T,
    pub lambda_p32: T,
}

#[derive(Debug, Error, PartialEq)]
pub enum ClosedFormError {
    #[error("invalid step: {reason}")]
    BadStep { reason: String },
    #[error("unsupported cost combination: {what}")]
    Unsupported { what: String },
    #[error("bisection failed to bracket the root")]
    BisectionFailed,
}

impl<T: Scalar> SingleAssetStep<T> {
    /// Linear forcing of the trade: `G − γσ² x_prev`.
    pub fn source(&self) -> T {
        self.g - self.gamma_sigma2 * self.x_prev
    }

    /// Total curvature `γσ² + λ`.
    pub fn curvature(&self) -> T {
        self.gamma_sigma2 + self.lambda_quad
    }

    /// Exact objective value at trade `t`, including every cost term.
    pub fn objective(&self, t: T) -> T {
        let half = T::of(0.5);
        self.g * t
            - self.gamma_sigma2 * self.x_prev * t
            - half * self.curvature() * t * t
            - self.lambda_spread * t.abs()
            - self.lambda_fin * (self.x_prev + t).abs()
            - self.lambda_p32 * t.abs().powf(T::of(1.5))
    }

    fn check(&self) -> Result<(), ClosedFormError> {
        if !(self.gamma_sigma2 > T::zero()) {
            return Err(ClosedFormError::BadStep { reason: "gamma_sigma2 must be positive".into() });
        }
        for (name, v) in [
            ("lambda_quad", self.lambda_quad),
            ("lambda_spread", self.lambda_spread),
            ("lambda_fin", self.lambda_fin),
            ("lambda_p32", self.lambda_p32),
        ] {
            if v < T::zero() || !v.is_finite() {
                return Err(ClosedFormError::BadStep { reason: format!("{name} must be nonnegative") });
            }
        }
        Ok(())
    }
}

/// Whether the signal clears the no-trade band `|G − γσ² x_prev| ≤ λ₀`.
pub fn spread_threshold_active<T: Scalar>(step: &SingleAssetStep<T>) -> bool {
    step.source().abs() > step.lambda_spread
}

/// Optimal trade under quadratic + spread costs, with the spread kink's
/// effective stiffness. Inside the band the trade is zero and the
/// stiffness infinite.
pub fn solve_spread_step<T: Scalar>(step: &SingleAssetStep<T>) -> Result<(T, T), ClosedFormError> {
    step.check()?;
    let s = step.source();
    let l0 = step.lambda_spread;
    if s.abs() <= l0 {
        return Ok((T::zero(), T::infinity()));
    }
    let sign = if s > T::zero() { T::one() } else { -T::one() };
    let trade = (s - l0 * sign) / step.curvature();
    let eta = if l0 == T::zero() { T::zero() } else { l0 / (T::of(2.0) * trade.abs()) };
    Ok((trade, eta))
}

/// Whether the end-of-step position survives the financing band
/// `|G + λ x_prev| ≤ λ_l`.
pub fn financing_keep_position<T: Scalar>(step: &SingleAssetStep<T>) -> bool {
    (step.g + step.lambda_quad * step.x_prev).abs() > step.lambda_fin
}

/// Optimal trade under quadratic + financing costs, with the financing
/// kink's effective stiffness at the end position. A cut position reports
/// infinite stiffness.
pub fn solve_financing_step<T: Scalar>(
    step: &SingleAssetStep<T>,
) -> Result<(T, T), ClosedFormError> {
    step.check()?;
    let drive = step.g + step.lambda_quad * step.x_prev;
    let ll = step.lambda_fin;
    if drive.abs() <= ll {
        return Ok((-step.x_prev, T::infinity()));
    }
    let sign = if drive > T::zero() { T::one() } else { -T::one() };
    let z = (drive - ll * sign) / step.curvature();
    let eta = if ll == T::zero() { T::zero() } else { ll / (T::of(2.0) * z.abs()) };
    Ok((z - step.x_prev, eta))
}

fn bisect<T: Scalar, F: Fn(T) -> T>(f: F, mut lo: T, mut hi: T, iters: usize) -> T {
    // assumes f(lo) <= 0 <= f(hi)
    for _ in 0..iters {
        let mid = T::of(0.5) * (lo + hi);
        if f(mid) <= T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    T::of(0.5) * (lo + hi)
}

/// Saturation ratio of the |Δx|^{3/2} cost at stiffness `eta`; the
/// optimal stiffness is its unit root.
pub fn power32_ratio<T: Scalar>(step: &SingleAssetStep<T>, eta: T) -> T {
    let s = step.source().abs();
    let l = step.lambda_p32;
    T::of(16.0 / 9.0) * eta * eta / (step.curvature() + T::of(2.0) * eta) * s / (l * l)
}

/// First-order-condition residual of the |Δx|^{3/2} problem at trade `t`.
pub fn power32_foc_residual<T: Scalar>(step: &SingleAssetStep<T>, t: T) -> T {
    let sign = if t > T::zero() {
        T::one()
    } else if t < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    step.source()
        - step.curvature() * t
        - T::of(1.5) * step.lambda_p32 * sign * t.abs().sqrt()
}

/// Optimal trade under quadratic + |Δx|^{3/2} costs.
///
/// The stiffness η solves a ratio equation that grows monotonically from 0
/// to ∞, so plain bisection always converges; the trade follows from
/// `(γσ² + λ + 2η) Δx = G − γσ² x_prev`. There is no threshold: any
/// nonzero signal trades. A zero signal returns zero trade with infinite
/// stiffness (the marginal cost ratio diverges as the trade vanishes).
pub fn solve_power32_step<T: Scalar>(step: &SingleAssetStep<T>) -> Result<(T, T), ClosedFormError> {
    step.check()?;
    let s = step.source();
    if step.lambda_p32 == T::zero() {
        return Ok((s / step.curvature(), T::zero()));
    }
    if s == T::zero() {
        return Ok((T::zero(), T::infinity()));
    }
    let mut hi = T::one();
    let mut grow = 0;
    while power32_ratio(step, hi) < T::one() {
        hi *= T::of(2.0);
        grow += 1;
        if grow > 400 {
            return Err(ClosedFormError::BisectionFailed);
        }
    }
    let eta = bisect(|e| power32_ratio(step, e) - T::one(), T::of(1e-12), hi, 200);
    let trade = s / (step.curvature() + T::of(2.0) * eta);
    Ok((trade, eta))
}

/// Mixed spread + |Δx|^{3/2} costs, solved by a single bisection.
///
/// Parametrizing by the power-cost stiffness η gives a trade magnitude
/// `(3λ_{1/2}/(4η))²` and a strictly decreasing first-order residual, so
/// one scalar root-find covers both kinks at once. Experimental: exercised
/// against the grid oracle but not part of the standard backtest path.
/// Returns `(trade, eta_spread, eta_p32)`.
pub fn solve_spread_power32_step<T: Scalar>(
    step: &SingleAssetStep<T>,
) -> Result<(T, T, T), ClosedFormError> {
    step.check()?;
    if step.lambda_p32 == T::zero() {
        let (t, e) = solve_spread_step(step)?;
        return Ok((t, e, if t == T::zero() { T::infinity() } else { T::zero() }));
    }
    if step.lambda_spread == T::zero() {
        let (t, e) = solve_power32_step(step)?;
        return Ok((t, if t == T::zero() { T::infinity() } else { T::zero() }, e));
    }
    let s = step.source();
    if s.abs() <= step.lambda_spread {
        return Ok((T::zero(), T::infinity(), T::infinity()));
    }
    let sign = if s > T::zero() { T::one() } else { -T::one() };
    let sa = s.abs();
    let kappa = step.curvature();
    let l0 = step.lambda_spread;
    let l32 = step.lambda_p32;
    // residual of |S| = κ|Δx| + λ₀ + (3/2)λ_{1/2}√|Δx| as a function of η,
    // with |Δx| = (3λ_{1/2}/(4η))²; decreasing in η from +∞ to λ₀ − |S| < 0
    let resid = |eta: T| {
        let root = T::of(0.75) * l32 / eta;
        let mag = root * root;
        kappa * mag + l0 + T::of(1.5) * l32 * root - sa
    };
    let mut lo = T::one();
    let mut grow = 0;
    while resid(lo) < T::zero() {
        lo *= T::of(0.5);
        grow += 1;
        if grow > 400 {
            return Err(ClosedFormError::BisectionFailed);
        }
    }
    let mut hi = lo;
    grow = 0;
    while resid(hi) > T::zero() {
        hi *= T::of(2.0);
        grow += 1;
        if grow > 400 {
            return Err(ClosedFormError::BisectionFailed);
        }
    }
    // resid decreases, so negate to feed the increasing-root helper
    let eta32 = bisect(|e| -resid(e), lo, hi, 200);
    let root = T::of(0.75) * l32 / eta32;
    let mag = root * root;
    let trade = sign * mag;
    let eta0 = l0 / (T::of(2.0) * mag);
    Ok((trade, eta0, eta32))
}

/// Result of a per-asset separable solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssetStepResult<T> {
    pub trade: T,
    /// Spread-kink stiffness (0 without spread cost, ∞ when pinned at 0).
    pub eta_spread: T,
    /// Power-cost stiffness (0 without the term, ∞ when pinned at 0).
    pub eta_p32: T,
    /// Multiplier of the binding interval end, zero when interior.
    pub bound_multiplier: T,
    /// +1 when the upper end binds, −1 lower, 0 interior.
    pub bound_side: i8,
}

/// Solve one asset of a separable problem: quadratic + spread + power
/// costs over a trade interval `[lo, hi]` (position bounds are mapped to a
/// trade interval by the caller). The objective is concave in one
/// variable, so the constrained optimum is the unconstrained one clipped
/// to the interval; the bound multiplier is the first-order residual left
/// at the clip point.
pub fn solve_asset_step<T: Scalar>(
    step: &SingleAssetStep<T>,
    lo: T,
    hi: T,
) -> Result<AssetStepResult<T>, ClosedFormError> {
    step.check()?;
    if step.lambda_fin > T::zero() {
        return Err(ClosedFormError::Unsupported {
            what: "financing cost on the separable path".into(),
        });
    }
    if lo > hi {
        return Err(ClosedFormError::BadStep { reason: "empty trade interval".into() });
    }
    let (free, _, _) = solve_spread_power32_step(step)?;
    let trade = free.max(lo).min(hi);
    let (bound_multiplier, bound_side) = if trade == free {
        (T::zero(), 0i8)
    } else {
        // residual of the smooth first-order condition at the clip point;
        // at trade zero the spread kink absorbs up to λ₀ of it
        let sign = if trade > T::zero() {
            T::one()
        } else if trade < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        let mut r = step.source()
            - step.curvature() * trade
            - step.lambda_spread * sign
            - T::of(1.5) * step.lambda_p32 * sign * trade.abs().sqrt();
        if trade == T::zero() {
            r = if r > T::zero() {
                (r - step.lambda_spread).max(T::zero())
            } else {
                (r + step.lambda_spread).min(T::zero())
            };
        }
        if trade == hi {
            (r.max(T::zero()), 1)
        } else {
            ((-r).max(T::zero()), -1)
        }
    };
    let two = T::of(2.0);
    let eta_spread = if step.lambda_spread == T::zero() {
        T::zero()
    } else if trade == T::zero() {
        T::infinity()
    } else {
        step.lambda_spread / (two * trade.abs())
    };
    let eta_p32 = if step.lambda_p32 == T::zero() {
        T::zero()
    } else if trade == T::zero() {
        T::infinity()
    } else {
        T::of(0.75) * step.lambda_p32 / trade.abs().sqrt()
    };
    Ok(AssetStepResult { trade, eta_spread, eta_p32, bound_multiplier, bound_side })
}
