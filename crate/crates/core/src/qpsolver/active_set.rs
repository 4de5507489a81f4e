//! Primal active-set method with null-space steps.
//!
//! The working set is refactored from scratch every iteration (Householder
//! QR of the active normals, Cholesky of the reduced Hessian); problems
//! here are tens of variables, so robustness and determinism are worth far
//! more than factor updates. Auxiliary L1 variables contribute zero
//! curvature, which a plain null-space method cannot start from; whenever
//! such a variable has no active row pinning it, the iteration first walks
//! it down its linear cost until a row blocks. Once every auxiliary
//! variable is pinned, the reduced Hessian is positive definite and the
//! usual Newton/ratio-test/multiplier cycle applies.
//!
//! Tie-breaking is deterministic everywhere: the lowest row index enters,
//! the most negative multiplier leaves (lowest row index on ties), and a
//! Bland-style lowest-index rule takes over after a run of degenerate
//! steps.

use ndarray::{s, Array1, Array2};

use super::{kkt_residual, QpError, QpProblem, QpSolution, VarKind};
use crate::linalg;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct SolverOptions<T> {
    /// KKT tolerance, applied on the spectrally scaled problem.
    pub tol: T,
    /// Iteration cap as a multiple of the variable count.
    pub max_iter_factor: usize,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        SolverOptions { tol: T::of(1e-9), max_iter_factor: 50 }
    }
}

/// Solve from a cold start.
pub fn solve<T: Scalar>(
    problem: &QpProblem<T>,
    opts: &SolverOptions<T>,
) -> Result<QpSolution<T>, QpError> {
    validate(problem)?;
    let m = problem.c.len();
    let mut y = if problem.rows.iter().all(|(_, b)| *b >= T::zero()) {
        Array1::zeros(m)
    } else {
        phase1(problem, opts)?
    };
    let mut active = Vec::new();
    finish(problem, opts, &mut y, &mut active)
}

/// Solve starting from a previous point and active set.
///
/// Falls back to a cold start when the point is infeasible for the current
/// rows. Re-solving an unchanged problem from its own solution terminates
/// immediately with the same active set.
pub fn solve_warm<T: Scalar>(
    problem: &QpProblem<T>,
    opts: &SolverOptions<T>,
    y0: &Array1<T>,
    active0: &[usize],
) -> Result<QpSolution<T>, QpError> {
    validate(problem)?;
    if y0.len() != problem.c.len() {
        return Err(QpError::InvalidProblem { reason: "warm-start point has wrong dimension".into() });
    }
    let bscale = problem.rows.iter().fold(T::one(), |a, (_, b)| a.max(b.abs()));
    let feas_tol = opts.tol * bscale;
    let feasible = problem.rows.iter().all(|(a, b)| a.dot(y0) <= *b + feas_tol);
    if !feasible {
        return solve(problem, opts);
    }
    let mut active: Vec<usize> = Vec::new();
    for &r in active0 {
        if r >= problem.rows.len() || active.contains(&r) {
            continue;
        }
        let (a, b) = &problem.rows[r];
        if (a.dot(y0) - *b).abs() <= feas_tol * T::of(10.0) {
            active.push(r);
        }
    }
    let mut y = y0.clone();
    finish(problem, opts, &mut y, &mut active)
}

fn validate<T: Scalar>(p: &QpProblem<T>) -> Result<(), QpError> {
    let m = p.c.len();
    if p.h.nrows() != m || p.h.ncols() != m {
        return Err(QpError::InvalidProblem { reason: "hessian shape mismatch".into() });
    }
    if p.var_map.vars.len() != m {
        return Err(QpError::InvalidProblem { reason: "variable map length mismatch".into() });
    }
    if p.var_map.rows.len() != p.rows.len() {
        return Err(QpError::InvalidProblem { reason: "row map length mismatch".into() });
    }
    if p.h.iter().any(|v| !v.is_finite()) || p.c.iter().any(|v| !v.is_finite()) {
        return Err(QpError::InvalidProblem { reason: "nonfinite objective data".into() });
    }
    let scale = p.h.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if scale == T::zero() {
        return Err(QpError::InvalidProblem {
            reason: "zero quadratic term; the objective is unbounded or trivial".into(),
        });
    }
    if linalg::asymmetry(&p.h) > scale * T::of(1e-12) {
        return Err(QpError::InvalidProblem { reason: "hessian not symmetric".into() });
    }
    for (a, b) in &p.rows {
        if a.len() != m || !b.is_finite() || a.iter().any(|v| !v.is_finite()) {
            return Err(QpError::InvalidProblem { reason: "malformed constraint row".into() });
        }
    }
    Ok(())
}

fn gershgorin<T: Scalar>(h: &Array2<T>) -> T {
    let mut worst = T::zero();
    for i in 0..h.nrows() {
        let mut s = T::zero();
        for j in 0..h.ncols() {
            s += h[[i, j]].abs();
        }
        worst = worst.max(s);
    }
    worst
}

fn axpy<T: Scalar>(y: &mut Array1<T>, alpha: T, d: &Array1<T>) {
    if alpha == T::zero() {
        return;
    }
    for i in 0..y.len() {
        y[i] += alpha * d[i];
    }
}

/// Largest feasible step along `d`, capped at `cap`, and the lowest-index
/// blocking row if one limits the step.
fn ratio_test<T: Scalar>(
    rows: &[(Array1<T>, T)],
    active: &[usize],
    y: &Array1<T>,
    d: &Array1<T>,
    cap: T,
) -> (T, Option<usize>) {
    let dnorm = linalg::inf_norm_vec(d);
    let mut alpha = cap;
    let mut block: Option<usize> = None;
    for (r, (a, b)) in rows.iter().enumerate() {
        if active.contains(&r) {
            continue;
        }
        let dir = a.dot(d);
        let anorm = linalg::inf_norm_vec(a);
        let dir_tol = T::epsilon() * T::of(256.0) * (T::one() + anorm * dnorm);
        if dir <= dir_tol {
            continue;
        }
        let slack = (*b - a.dot(y)).max(T::zero());
        let ratio = slack / dir;
        if ratio < alpha {
            alpha = ratio;
            block = Some(r);
        }
    }
    (alpha, block)
}

/// Iterate on the scaled problem from a feasible `y`. On success `y` and
/// `active` hold the optimum; the returned multipliers align with
/// `active`.
fn phase2<T: Scalar>(
    h: &Array2<T>,
    c: &Array1<T>,
    rows: &[(Array1<T>, T)],
    y: &mut Array1<T>,
    active: &mut Vec<usize>,
    tol: T,
    max_iter: usize,
) -> Result<Vec<T>, QpError> {
    let m = y.len();
    let zero_col: Vec<bool> =
        (0..m).map(|v| (0..m).all(|r| h[[r, v]] == T::zero())).collect();
    let mut zero_steps = 0usize;
    let bland_after = 3 * m + 10;

    for _ in 0..max_iter {
        // pin any free zero-curvature variable along its linear cost first
        let free_linear = (0..m).find(|&v| {
            zero_col[v]
                && c[v] != T::zero()
                && !active.iter().any(|&r| rows[r].0[v] != T::zero())
        });
        if let Some(v) = free_linear {
            let mut d: Array1<T> = Array1::zeros(m);
            d[v] = if c[v] > T::zero() { -T::one() } else { T::one() };
            let (alpha, block) = ratio_test(rows, active, y, &d, T::infinity());
            let Some(block) = block else {
                return Err(QpError::NumericalBreakdown {
                    what: format!("unbounded descent on zero-curvature variable {v}"),
                });
            };
            axpy(y, alpha, &d);
            active.push(block);
            continue;
        }

        let k = active.len();
        let mut qr = None;
        let mut z = None;
        if k > 0 {
            let mut nmat: Array2<T> = Array2::zeros((m, k));
            for (j, &r) in active.iter().enumerate() {
                for i in 0..m {
                    nmat[[i, j]] = rows[r].0[i];
                }
            }
            let f = linalg::qr(&nmat);
            if let Some(j) = f.deficient_col() {
                // dependent working set (stale warm start); drop the offender
                active.remove(j);
                zero_steps += 1;
                continue;
            }
            z = Some(f.null_basis());
            qr = Some(f);
        }

        let g = h.dot(&*y) + c;
        let d = match &z {
            Some(z) if z.ncols() == 0 => Array1::zeros(m),
            Some(z) => {
                let red = z.t().dot(&h.dot(z));
                let l = linalg::cholesky(&red).ok_or_else(|| QpError::NumericalBreakdown {
                    what: "reduced Hessian is not positive definite".into(),
                })?;
                let rhs = z.t().dot(&g).mapv(|x| -x);
                z.dot(&linalg::cholesky_solve(&l, &rhs))
            }
            None => {
                let l = linalg::cholesky(h).ok_or_else(|| QpError::NumericalBreakdown {
                    what: "hessian is not positive definite".into(),
                })?;
                linalg::cholesky_solve(&l, &g.mapv(|x| -x))
            }
        };

        let dnorm = linalg::inf_norm_vec(&d);
        if dnorm > tol * T::one().max(linalg::inf_norm_vec(y)) {
            let (alpha, block) = ratio_test(rows, active, y, &d, T::one());
            axpy(y, alpha, &d);
            if let Some(b) = block {
                active.push(b);
            }
            if alpha <= T::of(1e-14) {
                zero_steps += 1;
            } else {
                zero_steps = 0;
            }
            continue;
        }

        // stationary on the working set: examine multipliers
        if active.is_empty() {
            return Ok(Vec::new());
        }
        let mu = qr.expect("factorization exists for nonempty set").solve(&g.mapv(|x| -x));
        let mult_tol = tol * T::one().max(linalg::inf_norm_vec(&g));
        let mut drop_pos: Option<usize> = None;
        if zero_steps > bland_after {
            // Bland: lowest row index among negative multipliers
            let mut best_row = usize::MAX;
            for (pos, &r) in active.iter().enumerate() {
                if mu[pos] < -mult_tol && r < best_row {
                    best_row = r;
                    drop_pos = Some(pos);
                }
            }
        } else {
            let mut best: Option<(usize, T, usize)> = None;
            for (pos, &r) in active.iter().enumerate() {
                let v = mu[pos];
                if v >= -mult_tol {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((_, bv, br)) => v < *bv || (v == *bv && r < *br),
                };
                if better {
                    best = Some((pos, v, r));
                }
            }
            drop_pos = best.map(|(pos, _, _)| pos);
        }
        match drop_pos {
            None => return Ok(mu.to_vec()),
            Some(pos) => {
                active.remove(pos);
                zero_steps += 1;
            }
        }
    }
    Err(QpError::MaxIterations { limit: max_iter })
}

/// Find a feasible point by minimizing a penalized infeasibility slack:
/// min κt + ½‖y‖² + ½t² over rows `a·y − t ≤ b`, `t ≥ 0`, escalating κ
/// until the slack collapses. The start `(0, max_j −b_j)` is always
/// feasible, so the same phase-2 engine applies.
fn phase1<T: Scalar>(problem: &QpProblem<T>, opts: &SolverOptions<T>) -> Result<Array1<T>, QpError> {
    let m = problem.c.len();
    let mp = m + 1;
    let mut bscale = T::one();
    let mut worst = T::zero();
    for (_, b) in &problem.rows {
        bscale = bscale.max(b.abs());
        worst = worst.max(-*b);
    }
    let feas_tol = opts.tol * bscale;

    let mut rows1: Vec<(Array1<T>, T)> = Vec::with_capacity(problem.rows.len() + 1);
    for (a, b) in &problem.rows {
        let mut a1: Array1<T> = Array1::zeros(mp);
        for i in 0..m {
            a1[i] = a[i];
        }
        a1[m] = -T::one();
        rows1.push((a1, *b));
    }
    let mut tpos: Array1<T> = Array1::zeros(mp);
    tpos[m] = -T::one();
    rows1.push((tpos, T::zero()));

    let h1: Array2<T> = Array2::eye(mp);
    let mut kappa = T::one();
    for _ in 0..50 {
        let mut c1: Array1<T> = Array1::zeros(mp);
        c1[m] = kappa;
        let mut y: Array1<T> = Array1::zeros(mp);
        y[m] = worst;
        let mut active = Vec::new();
        phase2(&h1, &c1, &rows1, &mut y, &mut active, opts.tol, opts.max_iter_factor * mp)?;
        if y[m] <= feas_tol {
            return Ok(y.slice(s![..m]).to_owned());
        }
        kappa *= T::of(10.0);
        if !kappa.is_finite() {
            break;
        }
    }
    Err(QpError::Infeasible)
}

fn finish<T: Scalar>(
    problem: &QpProblem<T>,
    opts: &SolverOptions<T>,
    y: &mut Array1<T>,
    active: &mut Vec<usize>,
) -> Result<QpSolution<T>, QpError> {
    let m = problem.c.len();
    let scale = gershgorin(&problem.h);
    let hs = problem.h.mapv(|v| v / scale);
    let cs = problem.c.mapv(|v| v / scale);
    let mu = phase2(&hs, &cs, &problem.rows, y, active, opts.tol, opts.max_iter_factor * m.max(1))?;

    let mut multipliers = vec![T::zero(); problem.rows.len()];
    for (pos, &r) in active.iter().enumerate() {
        multipliers[r] = mu[pos] * scale;
    }
    let mut act = active.clone();
    act.sort_unstable();
    let mut trade: Array1<T> = Array1::zeros(problem.var_map.n_assets);
    for (pos, vk) in problem.var_map.vars.iter().enumerate() {
        if let VarKind::Trade(i) = vk {
            trade[*i] = y[pos];
        }
    }
    let hy = problem.h.dot(&*y);
    let objective = T::of(0.5) * y.dot(&hy) + problem.c.dot(&*y);
    let mut sol = QpSolution {
        y: y.clone(),
        trade,
        multipliers,
        active_set: act,
        kkt_residual: T::zero(),
        objective,
    };
    sol.kkt_residual = kkt_residual(problem, &sol)?;
    Ok(sol)
}
