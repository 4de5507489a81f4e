//! Cross-module checks: the fast path against the grid oracle, effective
//! stiffnesses against finite differences, and the algebraic invariants of
//! the attribution machinery on randomized inputs.

use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

use signalwise::attribution::backtest::{run_backtest, BacktestOptions};
use signalwise::effective::{
    attribution_multipliers, effective_matrices, projection_split, recombine_projection,
    solve_effective_step, AttributionMultiplier, Classification,
};
use signalwise::linalg;
use signalwise::model::{MarketModel, QuadCost};
use signalwise::oracle::{oracle_objective, oracle_solve, OracleSpec};
use signalwise::qpsolver::{assemble_problem, solve, ConstraintSpec, QpSolution, SolverOptions};
use signalwise::scenarios::rng::Rng;
use signalwise::scenarios::{generate_paths, generate_random, RandomSpec, Scenario, ScheduledConstraint};

struct Inst {
    model: MarketModel<f64>,
    x_prev: Array1<f64>,
    g: Array1<f64>,
    constraints: Vec<ConstraintSpec<f64>>,
}

/// Dense random instance: correlated risk, optional L1 terms, a couple of
/// constraints that always keep the zero trade feasible. `oblique` admits
/// exposure rows with dense random v; otherwise only per-asset bounds.
fn random_instance(seed: u64, n_max: usize, allow_l1: bool, oblique: bool) -> Inst {
    let mut r = Rng::new(seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let n = 1 + r.below(n_max);
    let mut a = Array2::zeros((n, n));
    for v in a.iter_mut() {
        *v = 0.4 * r.normal();
    }
    let mut sigma = a.dot(&a.t()) / n as f64;
    for i in 0..n {
        sigma[[i, i]] += r.range(0.05, 0.2);
    }
    let model = MarketModel {
        n_assets: n,
        sigma,
        gamma: r.range(0.5, 2.5),
        quad_cost: QuadCost::Proportional(r.range(0.1, 1.0)),
        lambda_spread: if allow_l1 && r.below(2) == 0 { r.range(0.005, 0.05) } else { 0.0 },
        lambda_financing: if allow_l1 && r.below(3) == 0 { r.range(0.005, 0.03) } else { 0.0 },
        lambda_power32: 0.0,
        impact: None,
    };
    let x_prev = Array1::from_iter((0..n).map(|_| 0.3 * r.normal()));
    let g = Array1::from_iter((0..n).map(|_| 0.15 * r.normal()));
    let mut constraints = Vec::new();
    for ci in 0..r.below(3) {
        let lower = -r.range(0.1, 0.8);
        let upper = r.range(0.1, 0.8);
        constraints.push(match r.below(3) {
            0 => ConstraintSpec::trade_bound(n, r.below(n), lower, upper, &format!("t{ci}")),
            1 => {
                // keep the current position inside the window
                let asset = r.below(n);
                let w = x_prev[asset].abs() + r.range(0.05, 0.5);
                ConstraintSpec::position_bound(n, asset, -w, w, &format!("p{ci}"))
            }
            _ if oblique => {
                let v = Array1::from_iter((0..n).map(|_| r.normal()));
                ConstraintSpec::trade_exposure(v, lower, upper, &format!("e{ci}"))
            }
            _ => ConstraintSpec::trade_bound(n, r.below(n), lower, upper, &format!("t{ci}b")),
        });
    }
    Inst { model, x_prev, g, constraints }
}

fn solve_inst(inst: &Inst) -> (QpSolution<f64>, Array2<f64>, Array2<f64>, signalwise::qpsolver::QpProblem<f64>) {
    let (q, p) = signalwise::model::build_static_matrices(&inst.model).unwrap();
    let problem =
        assemble_problem(&inst.model, &q, &p, &inst.x_prev, &inst.g, &inst.constraints).unwrap();
    let solution = solve(&problem, &SolverOptions::default()).unwrap();
    (solution, q, p, problem)
}

#[test]
fn solver_matches_grid_oracle_with_l1_terms() {
    for seed in 0..40u64 {
        let inst = random_instance(seed, 3, true, false);
        let (solution, _, _, _) = solve_inst(&inst);
        let reference = oracle_solve(
            &inst.model,
            &inst.x_prev,
            &inst.g,
            &inst.constraints,
            &OracleSpec::default(),
        )
        .unwrap();
        for i in 0..inst.model.n_assets {
            assert!(
                (solution.trade[i] - reference.trade[i]).abs() <= 2e-4,
                "seed {seed} asset {i}: fast {} vs grid {}",
                solution.trade[i],
                reference.trade[i]
            );
        }
    }
}

/// With dense exposure rows the grid cannot land on the active plane, so the
/// comparison is in objective value: the engine must never trail the grid
/// incumbent, and the incumbent must trail the engine by at most a gradient
/// bound times the final grid step.
#[test]
fn grid_oracle_never_beats_the_solver() {
    let spec = OracleSpec::default();
    let mut final_step = 2.0 * spec.half_width / (spec.coarse_points - 1) as f64;
    for _ in 0..spec.refinements {
        final_step /= 10.0;
    }
    for seed in 0..40u64 {
        let inst = random_instance(seed, 3, true, true);
        let (solution, q, p, _) = solve_inst(&inst);
        let reference =
            oracle_solve(&inst.model, &inst.x_prev, &inst.g, &inst.constraints, &spec).unwrap();

        for c in &inst.constraints {
            let val = if c.is_trade_side() {
                c.v.dot(&solution.trade)
            } else {
                c.v.dot(&(&inst.x_prev + &solution.trade))
            };
            let slack = 1e-8 * val.abs().max(1.0);
            assert!(
                val >= c.lower - slack && val <= c.upper + slack,
                "seed {seed} {}: value {val} outside [{}, {}]",
                c.label,
                c.lower,
                c.upper
            );
        }

        let f_fast =
            oracle_objective(&inst.model, &q, &p, &inst.x_prev, &inst.g, &solution.trade);
        let f_grid = reference.objective;
        assert!(
            f_fast >= f_grid - 1e-9 * f_grid.abs().max(1.0),
            "seed {seed}: solver objective {f_fast} trails grid incumbent {f_grid}"
        );
        let grad = &inst.g - &q.dot(&solution.trade) - &p.dot(&inst.x_prev);
        let lipschitz = grad.iter().map(|v| v.abs()).sum::<f64>()
            + inst.model.n_assets as f64 * (inst.model.lambda_spread + inst.model.lambda_financing);
        assert!(
            f_fast - f_grid <= 8.0 * lipschitz * final_step + 1e-9,
            "seed {seed}: grid incumbent {f_grid} trails solver {f_fast} by more than the grid resolution allows"
        );
        for i in 0..inst.model.n_assets {
            assert!(
                (solution.trade[i] - reference.trade[i]).abs() <= 2.0 * spec.half_width / (spec.coarse_points - 1) as f64,
                "seed {seed} asset {i}: fast {} vs grid {} differ beyond a coarse step",
                solution.trade[i],
                reference.trade[i]
            );
        }
    }
}

#[test]
fn separable_power_path_matches_grid_oracle() {
    for seed in 100..125u64 {
        let mut spec = RandomSpec::new(1 + (seed % 3) as usize, 2, 1, seed);
        spec.lambda_power32 = 0.02 + 0.05 * (seed % 5) as f64;
        spec.lambda_spread = if seed % 2 == 0 { 0.01 } else { 0.0 };
        spec.n_constraints = (seed % 3) as usize;
        let sc = generate_random(&spec);
        let out = run_backtest(&sc, &BacktestOptions::default()).unwrap();
        let reference = oracle_solve(
            &sc.model,
            &Array1::zeros(sc.n_assets()),
            &sc.signals.total_at(0),
            &sc.constraints_at(0),
            &OracleSpec::default(),
        )
        .unwrap();
        for i in 0..sc.n_assets() {
            assert!(
                (out.history.total_trade[[0, i]] - reference.trade[i]).abs() <= 2e-4,
                "seed {seed} asset {i}"
            );
        }
    }
}

#[test]
fn effective_multiplier_matches_bound_sensitivity() {
    let mut checked = 0;
    for seed in 0..60u64 {
        let mut r = Rng::new(seed.wrapping_mul(77).wrapping_add(5));
        let n = 2;
        let mut sigma = Array2::eye(n);
        sigma[[0, 0]] = r.range(0.2, 0.8);
        sigma[[1, 1]] = r.range(0.2, 0.8);
        sigma[[0, 1]] = 0.2 * sigma[[0, 0]].min(sigma[[1, 1]]);
        sigma[[1, 0]] = sigma[[0, 1]];
        let model = MarketModel {
            n_assets: n,
            sigma,
            gamma: 1.0,
            quad_cost: QuadCost::Proportional(r.range(0.2, 1.0)),
            lambda_spread: 0.0,
            lambda_financing: 0.0,
            lambda_power32: 0.0,
            impact: None,
        };
        let x_prev = array![0.0, 0.0];
        let g = array![r.range(0.8, 1.6), r.range(-0.3, 0.3)];
        let m = r.range(0.1, 0.4);
        let position_like = seed % 2 == 0;

        let f_star = |bound: f64| -> (f64, f64) {
            let c = if position_like {
                ConstraintSpec::position_bound(n, 0, f64::NEG_INFINITY, bound, "cap")
            } else {
                ConstraintSpec::trade_bound(n, 0, f64::NEG_INFINITY, bound, "cap")
            };
            let constraints = vec![c];
            let (q, p) = signalwise::model::build_static_matrices(&model).unwrap();
            let problem = assemble_problem(&model, &q, &p, &x_prev, &g, &constraints).unwrap();
            let solution = solve(&problem, &SolverOptions::default()).unwrap();
            let mults =
                attribution_multipliers(&solution, &constraints, &problem.var_map, 0.0, 0.0, &x_prev)
                    .unwrap();
            (-solution.objective, mults[0].eta)
        };

        let (_, eta) = f_star(m);
        if eta <= 1e-6 || !eta.is_finite() {
            continue;
        }
        // differentiate the optimal value in the squared bound
        let delta = 1e-6;
        let (f_hi, _) = f_star((m * m + delta).sqrt());
        let (f_lo, _) = f_star((m * m - delta).sqrt());
        let fd = (f_hi - f_lo) / (2.0 * delta);
        assert!(
            (fd - eta).abs() <= 1e-4 * eta.max(1.0),
            "seed {seed}: finite difference {fd} vs eta {eta}"
        );
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} instances had an active bound");
}

#[test]
fn signal_split_rebuilds_the_optimizer_trade() {
    for seed in 0..200u64 {
        let inst = random_instance(seed.wrapping_add(7000), 4, true, true);
        let (solution, q, p, problem) = solve_inst(&inst);
        let mults = attribution_multipliers(
            &solution,
            &inst.constraints,
            &problem.var_map,
            inst.model.lambda_spread,
            inst.model.lambda_financing,
            &inst.x_prev,
        )
        .unwrap();
        let em = effective_matrices(&q, &p, &mults);

        // random 3-way split of the signal and of the starting book
        let mut r = Rng::new(seed ^ 0xABCD);
        let n = inst.model.n_assets;
        let k = 3;
        let mut parts_g = vec![Array1::zeros(n); k];
        let mut parts_x = vec![Array1::zeros(n); k];
        for i in 0..n {
            let (w0, w1) = (r.uniform(), r.uniform());
            let w = [w0, w1 - w0.min(w1), 0.0];
            let mut rest_g = inst.g[i];
            let mut rest_x = inst.x_prev[i];
            for (kk, frac) in w.iter().enumerate().take(k - 1) {
                let share_g = frac * inst.g[i];
                let share_x = frac * inst.x_prev[i];
                parts_g[kk][i] = share_g;
                parts_x[kk][i] = share_x;
                rest_g -= share_g;
                rest_x -= share_x;
            }
            parts_g[k - 1][i] = rest_g;
            parts_x[k - 1][i] = rest_x;
        }

        let mut total: Array1<f64> = Array1::zeros(n);
        for kk in 0..k {
            total = total + solve_effective_step(&em, &parts_x[kk], &parts_g[kk]).unwrap();
        }
        let scale = 1.0_f64.max(inst.g.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        for i in 0..n {
            assert!(
                (total[i] - solution.trade[i]).abs() <= 1e-7 * scale,
                "seed {seed} asset {i}: split sum {} vs trade {}",
                total[i],
                solution.trade[i]
            );
        }
    }
}

#[test]
fn projection_blend_matches_direct_effective_solve() {
    let q: Array2<f64> = array![[1.5, 0.2], [0.2, 0.9]];
    let p: Array2<f64> = array![[0.8, 0.1], [0.1, 0.5]];
    let x_prev: Array1<f64> = array![0.3, -0.2];
    let g: Array1<f64> = array![0.7, 0.4];
    let v: Array1<f64> = array![1.0, -0.5];
    for cls in [Classification::TradeLike, Classification::PositionLike] {
        for eta in [0.0, 0.5, 10.0, 1e6] {
            let mult = AttributionMultiplier {
                constraint_label: "c".into(),
                classification: cls,
                eta,
                bound_used: 0.1,
                lambda: 1.0,
                epsilon: 1,
                v: v.clone(),
                degenerate: false,
            };
            let em = effective_matrices(&q, &p, std::slice::from_ref(&mult));
            let direct = solve_effective_step(&em, &x_prev, &g).unwrap();
            let (alpha, unc, proj, corr) =
                projection_split(&q, &p, &v, eta, &x_prev, &g, cls).unwrap();
            let blended = recombine_projection(alpha, &unc, &proj, &corr);
            for i in 0..2 {
                assert!(
                    (direct[i] - blended[i]).abs() < 1e-10,
                    "cls {cls:?} eta {eta}: {direct} vs {blended}"
                );
            }
        }
    }
}

#[test]
fn tiny_bound_limit_approaches_hard_direction() {
    for (seed, position_like) in [(3u64, false), (4, true), (11, false), (12, true)] {
        let mut inst = random_instance(seed.wrapping_add(900), 3, false, true);
        inst.constraints.clear();
        let n = inst.model.n_assets;
        // make sure the pinned asset wants to trade
        inst.g[0] = 0.5;
        let make = |bound: f64| {
            if position_like {
                ConstraintSpec::position_bound(n, 0, -bound, bound, "pin")
            } else {
                ConstraintSpec::trade_bound(n, 0, -bound, bound, "pin")
            }
        };
        let mut hard_inst = Inst {
            model: inst.model.clone(),
            x_prev: inst.x_prev.clone(),
            g: inst.g.clone(),
            constraints: vec![make(0.0)],
        };
        if position_like {
            // a zero position window must contain the prior position
            hard_inst.x_prev[0] = 0.0;
        }
        let soft_inst = Inst {
            model: hard_inst.model.clone(),
            x_prev: hard_inst.x_prev.clone(),
            g: hard_inst.g.clone(),
            constraints: vec![make(1e-6)],
        };
        let (hard, ..) = solve_inst(&hard_inst);
        let (soft, ..) = solve_inst(&soft_inst);
        for i in 0..n {
            assert!(
                (hard.trade[i] - soft.trade[i]).abs() <= 1e-4,
                "seed {seed} asset {i}: hard {} vs soft {}",
                hard.trade[i],
                soft.trade[i]
            );
        }
    }
}

#[test]
fn reruns_are_bit_identical() {
    let mut spec = RandomSpec::new(4, 2, 30, 77);
    spec.n_constraints = 3;
    spec.lambda_spread = 0.01;
    let sc = generate_random(&spec);
    let a = run_backtest(&sc, &BacktestOptions::default()).unwrap();
    let b = run_backtest(&sc, &BacktestOptions::default()).unwrap();
    assert_eq!(a.history, b.history);
}

#[test]
fn ar1_paths_hit_the_stationary_variance() {
    let (g, _) = generate_paths(1, 100_000, 5, &[0.9], &[0.07], 0.0);
    let m: f64 = g.iter().sum::<f64>() / g.len() as f64;
    let var: f64 = g.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / g.len() as f64;
    let target = 0.07f64 * 0.07;
    assert!((var - target).abs() < 0.1 * target, "var {var} vs {target}");
}

#[test]
fn schedule_changes_flow_into_the_solve() {
    let mut spec = RandomSpec::new(2, 1, 10, 55);
    spec.n_constraints = 0;
    let mut sc = generate_random(&spec);
    // clamp all trading from step 5 on
    sc.constraints.push(ScheduledConstraint {
        base: ConstraintSpec::trade_bound(2, 0, -10.0, 10.0, "clamp"),
        schedule: vec![signalwise::scenarios::BoundChange {
            from_step: 5,
            lower: 0.0,
            upper: 0.0,
        }],
        group: None,
    });
    sc.constraints.push(ScheduledConstraint {
        base: ConstraintSpec::trade_bound(2, 1, -10.0, 10.0, "clamp2"),
        schedule: vec![signalwise::scenarios::BoundChange {
            from_step: 5,
            lower: 0.0,
            upper: 0.0,
        }],
        group: None,
    });
    let out = run_backtest(&sc, &BacktestOptions::default()).unwrap();
    for t in 5..10 {
        for i in 0..2 {
            assert_eq!(out.history.total_trade[[t, i]], 0.0, "step {t} asset {i}");
        }
    }
    assert!(out.history.total_trade.row(4).iter().any(|v| *v != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_assets_permutes_the_solution(seed in 0u64..300) {
        let inst = random_instance(seed.wrapping_add(40_000), 4, true, true);
        let n = inst.model.n_assets;
        prop_assume!(n >= 2);
        let (base, ..) = solve_inst(&inst);

        // rotate assets by one
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let mut sigma = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                sigma[[perm[i], perm[j]]] = inst.model.sigma[[i, j]];
            }
        }
        let mut permuted = Inst {
            model: MarketModel { sigma, ..inst.model.clone() },
            x_prev: Array1::zeros(n),
            g: Array1::zeros(n),
            constraints: Vec::new(),
        };
        for i in 0..n {
            permuted.x_prev[perm[i]] = inst.x_prev[i];
            permuted.g[perm[i]] = inst.g[i];
        }
        for c in &inst.constraints {
            let mut v = Array1::zeros(n);
            for i in 0..n {
                v[perm[i]] = c.v[i];
            }
            permuted.constraints.push(ConstraintSpec {
                kind: c.kind,
                v,
                lower: c.lower,
                upper: c.upper,
                label: c.label.clone(),
            });
        }
        let (rotated, ..) = solve_inst(&permuted);
        for i in 0..n {
            prop_assert!((rotated.trade[perm[i]] - base.trade[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn effective_step_is_linear_in_the_signal(seed in 0u64..200, a in -3.0f64..3.0) {
        let inst = random_instance(seed.wrapping_add(60_000), 3, true, true);
        let (solution, q, p, problem) = solve_inst(&inst);
        let mults = attribution_multipliers(
            &solution,
            &inst.constraints,
            &problem.var_map,
            inst.model.lambda_spread,
            inst.model.lambda_financing,
            &inst.x_prev,
        ).unwrap();
        let em = effective_matrices(&q, &p, &mults);
        let zero = Array1::zeros(inst.model.n_assets);
        let one = solve_effective_step(&em, &zero, &inst.g).unwrap();
        let scaled = solve_effective_step(&em, &zero, &inst.g.mapv(|v| v * a)).unwrap();
        for i in 0..inst.model.n_assets {
            prop_assert!((scaled[i] - a * one[i]).abs() < 1e-8 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn effective_matrices_never_soften(seed in 0u64..200) {
        let mut r = Rng::new(seed.wrapping_add(123));
        let n = 2 + r.below(3);
        let q = Array2::eye(n);
        let p = Array2::eye(n) * 0.5;
        let mut mults = Vec::new();
        for m in 0..r.below(4) {
            let v = Array1::from_iter((0..n).map(|_| r.normal()));
            mults.push(AttributionMultiplier {
                constraint_label: format!("m{m}"),
                classification: if r.below(2) == 0 {
                    Classification::TradeLike
                } else {
                    Classification::PositionLike
                },
                eta: r.range(0.0, 5.0),
                bound_used: 0.1,
                lambda: 1.0,
                epsilon: 1,
                v,
                degenerate: false,
            });
        }
        let em = effective_matrices(&q, &p, &mults);
        let diff = &em.q_bar - &q;
        let eigs = linalg::sym_eigenvalues(&diff);
        let scale = diff.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        prop_assert!(eigs[0] >= -1e-10 * scale);
    }

    #[test]
    fn l1_shares_sum_to_the_total_cost(seed in 0u64..200) {
        let mut r = Rng::new(seed.wrapping_add(321));
        let n = 1 + r.below(4);
        let k = 1 + r.below(3);
        let mut per = Array2::zeros((k, n));
        for v in per.iter_mut() {
            *v = r.normal();
        }
        let total = (0..n)
            .map(|i| (0..k).map(|c| per[[c, i]]).sum::<f64>())
            .collect::<Array1<f64>>();
        let lambda = r.range(0.01, 0.5);
        let shares = signalwise::attribution::attribute_spread_cost(&per, &total, lambda);
        let direct = lambda * total.iter().fold(0.0f64, |acc, v| acc + v.abs());
        prop_assert!((shares.sum() - direct).abs() < 1e-12 * (1.0 + direct));
    }
}

#[test]
fn dynamic_scaling_shrinks_trades_toward_slower_signals() {
    let mut spec = RandomSpec::new(2, 2, 8, 99);
    spec.n_constraints = 0;
    let sc = generate_random(&spec);
    let mut dyn_sc: Scenario<f64> = sc.clone();
    dyn_sc.dynamic = Some(signalwise::model::DynamicModelParams {
        phi: array![0.0, 2.0],
        a: 1.0,
    });
    let plain = run_backtest(&sc, &BacktestOptions::default()).unwrap();
    let scaled = run_backtest(&dyn_sc, &BacktestOptions::default()).unwrap();
    assert!(scaled.diagnostics.dynamic_scaled);
    // fast-signal component shrinks, slow-signal component is untouched
    let norm = |h: &signalwise::AttributionHistoryF64, c: usize| -> f64 {
        (0..8).map(|t| (0..2).map(|i| h.positions[[t, c, i]].powi(2)).sum::<f64>()).sum()
    };
    assert!((norm(&plain.history, 0) - norm(&scaled.history, 0)).abs() < 1e-18);
    assert!(norm(&scaled.history, 1) < norm(&plain.history, 1));
}
