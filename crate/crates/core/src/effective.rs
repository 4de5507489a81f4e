//! Constraint multipliers as effective quadratic costs and risks.
//!
//! A binding linear constraint `v·x ≤ M` can be rewritten as `(v·x)² ≤ M²`
//! without moving the optimum; the multiplier of the squared form,
//! `η = ε λ / (2M)`, then acts exactly like an extra quadratic term
//! `2η v⊗v` in the objective. Trade-side constraints augment only the cost
//! matrix `Q`, position-side ones augment risk and cost alike. L1 kinks get
//! the same treatment through their auxiliary bounds: `η_i = λ₀/(2|Δx_i|)`
//! for the spread and `η_i = λ_l/(2|x_i|)` for financing. A constraint
//! pinned at bound zero has infinite effective stiffness; those directions
//! are kept symbolic and enforced exactly through an equality-constrained
//! solve instead of a large penalty.

use ndarray::{Array1, Array2, s};
use thiserror::Error;

use crate::linalg;
use crate::qpsolver::{ConstraintKind, ConstraintSpec, QpSolution, RowSource, Side, VarMap};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    /// Acts on the trade; contributes an effective cost (Q only).
    TradeLike,
    /// Acts on the end position; contributes an effective risk (Q and P).
    PositionLike,
}

pub fn classify_constraint<T>(spec: &ConstraintSpec<T>) -> Classification {
    match spec.kind {
        ConstraintKind::TradeBound | ConstraintKind::TradeExposure | ConstraintKind::L1TradeAux => {
            Classification::TradeLike
        }
        ConstraintKind::PositionBound
        | ConstraintKind::PositionExposure
        | ConstraintKind::L1PositionAux => Classification::PositionLike,
    }
}

/// One constraint's contribution to the effective matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMultiplier<T> {
    pub constraint_label: String,
    pub classification: Classification,
    /// Multiplier of the squared constraint; `+∞` marks a constraint held
    /// exactly at bound zero. Zero for constraints that are not binding.
    pub eta: T,
    /// The bound the constraint is pinned at (the aux value for L1 rows).
    pub bound_used: T,
    /// Row multiplier behind the stiffness (the pair total for L1 kinks).
    pub lambda: T,
    /// +1 when the upper side binds, −1 for the lower side.
    pub epsilon: i8,
    pub v: Array1<T>,
    /// True when both sides of a bound pair looked binding and the larger
    /// multiplier was used.
    pub degenerate: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum EffectiveError {
    #[error("constraint '{label}' yields a negative effective stiffness (eta = {eta}); its trade/position role is mis-specified")]
    Classification { label: String, eta: String },
    #[error("effective linear system is singular")]
    SingularSystem,
    #[error("direction has nonpositive curvature v·Q⁻¹v")]
    NonPositiveCurvature,
    #[error("dimension mismatch in effective-step inputs")]
    DimensionMismatch,
}

/// Convert a solved step's row multipliers into attribution multipliers.
///
/// Every user constraint gets an entry (`eta = 0` when slack); when the
/// model carries L1 terms, every asset also gets a spread entry and/or a
/// financing entry, infinite where the kink holds the trade or position at
/// exactly zero.
pub fn attribution_multipliers<T: Scalar>(
    solution: &QpSolution<T>,
    constraints: &[ConstraintSpec<T>],
    var_map: &VarMap,
    lambda_spread: T,
    lambda_financing: T,
    x_prev: &Array1<T>,
) -> Result<Vec<AttributionMultiplier<T>>, EffectiveError> {
    let n = var_map.n_assets;
    let lam_scale = solution
        .multipliers
        .iter()
        .fold(T::one(), |a, v| a.max(v.abs()));
    let lam_tol = T::of(1e-9) * lam_scale;
    let y_scale = T::one().max(linalg::inf_norm_vec(&solution.y));
    let zero_tol = T::of(1e-9) * y_scale;

    let mut out: Vec<AttributionMultiplier<T>> = Vec::new();

    // user constraints, in input order
    for (ci, spec) in constraints.iter().enumerate() {
        let mut lam_up = T::zero();
        let mut lam_lo = T::zero();
        for (r, src) in var_map.rows.iter().enumerate() {
            if let RowSource::User { constraint, side } = src {
                if *constraint == ci {
                    match side {
                        Side::Upper => lam_up = solution.multipliers[r],
                        Side::Lower => lam_lo = solution.multipliers[r],
                    }
                }
            }
        }
        let classification = classify_constraint(spec);
        let degenerate = lam_up > lam_tol && lam_lo > lam_tol;
        let (lam, epsilon, bound) = if lam_up >= lam_lo {
            (lam_up, 1i8, spec.upper)
        } else {
            (lam_lo, -1i8, spec.lower)
        };
        if lam <= lam_tol {
            out.push(AttributionMultiplier {
                constraint_label: spec.label.clone(),
                classification,
                eta: T::zero(),
                bound_used: T::zero(),
                lambda: T::zero(),
                epsilon: 1,
                v: spec.v.clone(),
                degenerate: false,
            });
            continue;
        }
        let eta = if bound == T::zero() {
            T::infinity()
        } else {
            T::of(epsilon as f64) * lam / (T::of(2.0) * bound)
        };
        if eta < T::zero() {
            return Err(EffectiveError::Classification {
                label: spec.label.clone(),
                eta: format!("{eta}"),
            });
        }
        out.push(AttributionMultiplier {
            constraint_label: spec.label.clone(),
            classification,
            eta,
            bound_used: bound,
            lambda: lam,
            epsilon,
            v: spec.v.clone(),
            degenerate,
        });
    }

    // spread kinks: eta_i = lambda0 / (2 s_i), infinite on untraded assets
    if lambda_spread > T::zero() {
        for i in 0..n {
            let s_i = var_map.spread_var(i).map(|p| solution.y[p]).unwrap_or(T::zero());
            let trade = solution.trade[i];
            let (eta, epsilon) = if s_i <= zero_tol {
                (T::infinity(), 1i8)
            } else {
                (lambda_spread / (T::of(2.0) * s_i), if trade >= T::zero() { 1 } else { -1 })
            };
            out.push(AttributionMultiplier {
                constraint_label: format!("spread[{i}]"),
                classification: Classification::TradeLike,
                eta,
                bound_used: s_i,
                lambda: lambda_spread,
                epsilon,
                v: basis(n, i),
                degenerate: false,
            });
        }
    }

    // financing kinks: eta_i = lambda_l / (2 u_i), infinite on flat assets
    if lambda_financing > T::zero() {
        for i in 0..n {
            let u_i = var_map.financing_var(i).map(|p| solution.y[p]).unwrap_or(T::zero());
            let pos = x_prev[i] + solution.trade[i];
            let (eta, epsilon) = if u_i <= zero_tol {
                (T::infinity(), 1i8)
            } else {
                (lambda_financing / (T::of(2.0) * u_i), if pos >= T::zero() { 1 } else { -1 })
            };
            out.push(AttributionMultiplier {
                constraint_label: format!("financing[{i}]"),
                classification: Classification::PositionLike,
                eta,
                bound_used: u_i,
                lambda: lambda_financing,
                epsilon,
                v: basis(n, i),
                degenerate: false,
            });
        }
    }

    Ok(out)
}

fn basis<T: Scalar>(n: usize, i: usize) -> Array1<T> {
    let mut v = Array1::zeros(n);
    v[i] = T::one();
    v
}

/// Original matrices plus `2η v⊗v` for every finite multiplier; infinite
/// multipliers become exact equality directions.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveMatrices<T> {
    pub q_bar: Array2<T>,
    pub p_bar: Array2<T>,
    pub hard_directions: Vec<(Array1<T>, Classification)>,
}

pub fn effective_matrices<T: Scalar>(
    q: &Array2<T>,
    p: &Array2<T>,
    mults: &[AttributionMultiplier<T>],
) -> EffectiveMatrices<T> {
    let mut q_bar = q.clone();
    let mut p_bar = p.clone();
    let mut hard = Vec::new();
    for m in mults {
        if m.eta == T::zero() {
            continue;
        }
        if m.eta.is_infinite() {
            hard.push((m.v.clone(), m.classification));
            continue;
        }
        let two_eta = T::of(2.0) * m.eta;
        for i in 0..q_bar.nrows() {
            for j in 0..q_bar.ncols() {
                let add = two_eta * m.v[i] * m.v[j];
                q_bar[[i, j]] += add;
                if m.classification == Classification::PositionLike {
                    p_bar[[i, j]] += add;
                }
            }
        }
    }
    EffectiveMatrices { q_bar, p_bar, hard_directions: hard }
}

fn spd_solve<T: Scalar>(a: &Array2<T>, b: &Array1<T>) -> Option<Array1<T>> {
    match linalg::cholesky(a) {
        Some(l) => Some(linalg::cholesky_solve(&l, b)),
        None => linalg::solve(a, b),
    }
}

/// Drop hard directions that are linearly dependent on earlier ones.
///
/// Engine-produced duplicates (a trade kink and a financing kink pinning
/// the same asset) impose compatible equalities, so keeping the first is
/// enough.
fn independent_hard<T: Scalar>(
    n: usize,
    hard: &[(Array1<T>, Classification)],
) -> Vec<(Array1<T>, Classification)> {
    let mut kept: Vec<(Array1<T>, Classification)> = Vec::new();
    for (v, cls) in hard {
        let k = kept.len() + 1;
        let mut nmat: Array2<T> = Array2::zeros((n, k));
        for (j, (w, _)) in kept.iter().enumerate() {
            for i in 0..n {
                nmat[[i, j]] = w[i];
            }
        }
        for i in 0..n {
            nmat[[i, k - 1]] = v[i];
        }
        if n < k || linalg::qr(&nmat).deficient_col().is_some() {
            continue;
        }
        kept.push((v.clone(), *cls));
    }
    kept
}

/// One linear solve of the effective optimality equation
/// `Q̄ Δx + P̄ x_prev = source`, with any hard directions imposed exactly
/// (`v·Δx = 0` trade-like, `v·(x_prev + Δx) = 0` position-like).
pub fn solve_effective_step<T: Scalar>(
    em: &EffectiveMatrices<T>,
    x_prev: &Array1<T>,
    source: &Array1<T>,
) -> Result<Array1<T>, EffectiveError> {
    let n = em.q_bar.nrows();
    if x_prev.len() != n || source.len() != n {
        return Err(EffectiveError::DimensionMismatch);
    }
    let rhs = source - &em.p_bar.dot(x_prev);
    if em.hard_directions.is_empty() {
        return spd_solve(&em.q_bar, &rhs).ok_or(EffectiveError::SingularSystem);
    }
    let hard = independent_hard(n, &em.hard_directions);
    let k = hard.len();
    let dim = n + k;
    let mut kkt: Array2<T> = Array2::zeros((dim, dim));
    let mut b: Array1<T> = Array1::zeros(dim);
    for i in 0..n {
        for j in 0..n {
            kkt[[i, j]] = em.q_bar[[i, j]];
        }
        b[i] = rhs[i];
    }
    for (j, (v, cls)) in hard.iter().enumerate() {
        for i in 0..n {
            kkt[[i, n + j]] = v[i];
            kkt[[n + j, i]] = v[i];
        }
        b[n + j] = match cls {
            Classification::TradeLike => T::zero(),
            Classification::PositionLike => -v.dot(x_prev),
        };
    }
    let sol = linalg::solve(&kkt, &b).ok_or(EffectiveError::SingularSystem)?;
    Ok(sol.slice(s![..n]).to_owned())
}

/// Large-but-finite stand-in for the exact hard-direction solve; useful as
/// an independent cross-check of the equality path.
pub fn solve_effective_step_large_eta<T: Scalar>(
    em: &EffectiveMatrices<T>,
    x_prev: &Array1<T>,
    source: &Array1<T>,
) -> Result<Array1<T>, EffectiveError> {
    let n = em.q_bar.nrows();
    let mut trace = T::zero();
    for i in 0..n {
        trace += em.q_bar[[i, i]];
    }
    let eta_max = T::of(1e8) * trace / T::of(n as f64);
    let mut q = em.q_bar.clone();
    let mut p = em.p_bar.clone();
    for (v, cls) in &em.hard_directions {
        for i in 0..n {
            for j in 0..n {
                let add = T::of(2.0) * eta_max * v[i] * v[j];
                q[[i, j]] += add;
                if *cls == Classification::PositionLike {
                    p[[i, j]] += add;
                }
            }
        }
    }
    let rhs = source - &p.dot(x_prev);
    spd_solve(&q, &rhs).ok_or(EffectiveError::SingularSystem)
}

/// The single-constraint decomposition of the effective step: a convex
/// blend of the unconstrained trade and its projection onto the constraint
/// surface, with weight `α = 2η vQ⁻¹v / (1 + 2η vQ⁻¹v)`, plus a position
/// unwind term for position-like constraints.
pub fn projection_split<T: Scalar>(
    q: &Array2<T>,
    p: &Array2<T>,
    v: &Array1<T>,
    eta: T,
    x_prev: &Array1<T>,
    source: &Array1<T>,
    kind: Classification,
) -> Result<(T, Array1<T>, Array1<T>, Array1<T>), EffectiveError> {
    let n = q.nrows();
    if v.len() != n || x_prev.len() != n || source.len() != n {
        return Err(EffectiveError::DimensionMismatch);
    }
    let w = spd_solve(q, v).ok_or(EffectiveError::SingularSystem)?;
    let beta = v.dot(&w);
    if beta <= T::zero() {
        return Err(EffectiveError::NonPositiveCurvature);
    }
    let rhs = source - &p.dot(x_prev);
    let unconstrained = spd_solve(q, &rhs).ok_or(EffectiveError::SingularSystem)?;
    let vu = v.dot(&unconstrained) / beta;
    let projected = &unconstrained - &w.mapv(|x| x * vu);
    let correction = match kind {
        Classification::TradeLike => Array1::zeros(n),
        Classification::PositionLike => {
            let vx = v.dot(x_prev) / beta;
            w.mapv(|x| -x * vx)
        }
    };
    let alpha = if eta.is_infinite() {
        T::one()
    } else {
        let t = T::of(2.0) * eta * beta;
        t / (T::one() + t)
    };
    Ok((alpha, unconstrained, projected, correction))
}

/// Recombine a projection split into the effective trade.
pub fn recombine_projection<T: Scalar>(
    alpha: T,
    unconstrained: &Array1<T>,
    projected: &Array1<T>,
    correction: &Array1<T>,
) -> Array1<T> {
    let mut out = Array1::zeros(unconstrained.len());
    for i in 0..out.len() {
        out[i] = (T::one() - alpha) * unconstrained[i]
            + alpha * projected[i]
            + alpha * correction[i];
    }
    out
}

/// Residual of the effective optimality equation at the constrained
/// optimum, measured on the complement of the hard directions.
pub fn verify_reconstruction<T: Scalar>(
    em: &EffectiveMatrices<T>,
    x_prev: &Array1<T>,
    source: &Array1<T>,
    trade_star: &Array1<T>,
) -> T {
    let n = em.q_bar.nrows();
    let mut r = em.q_bar.dot(trade_star) + em.p_bar.dot(x_prev) - source;
    let hard = independent_hard(n, &em.hard_directions);
    if !hard.is_empty() {
        let k = hard.len();
        let mut nmat: Array2<T> = Array2::zeros((n, k));
        for (j, (v, _)) in hard.iter().enumerate() {
            for i in 0..n {
                nmat[[i, j]] = v[i];
            }
        }
        let f = linalg::qr(&nmat);
        let q1 = f.q.slice(s![.., ..k]);
        let coeffs = q1.t().dot(&r);
        let back = q1.dot(&coeffs);
        r = &r - &back;
    }
    linalg::inf_norm_vec(&r)
}
