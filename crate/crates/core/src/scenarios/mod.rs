//! Scenario assembly: market model, signal paths, realized returns and
//! constraint schedules, either generated from a seed or loaded from CSV.

pub mod config;
pub mod csv;
pub mod rng;

use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

use crate::model::{DynamicModelParams, MarketModel, QuadCost, SignalSet};
use crate::qpsolver::ConstraintSpec;
use crate::scalar::Scalar;
use rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("model rejected: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("constraint '{label}' rejected: {reason}")]
    Constraint { label: String, reason: String },
    #[error("scenario inconsistent: {what}")]
    Invalid { what: String },
}

/// Bound override taking effect at a given step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundChange<T> {
    pub from_step: usize,
    pub lower: T,
    pub upper: T,
}

/// A constraint with an optional time-varying bound schedule and an
/// optional pooling group for constraint-portfolio attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledConstraint<T> {
    pub base: ConstraintSpec<T>,
    pub schedule: Vec<BoundChange<T>>,
    pub group: Option<String>,
}

impl<T: Scalar> ScheduledConstraint<T> {
    pub fn fixed(base: ConstraintSpec<T>) -> Self {
        ScheduledConstraint { base, schedule: Vec::new(), group: None }
    }

    /// The constraint as it applies at step `t`: the last override with
    /// `from_step <= t` wins.
    pub fn at(&self, t: usize) -> ConstraintSpec<T> {
        let mut c = self.base.clone();
        for ch in &self.schedule {
            if ch.from_step <= t {
                c.lower = ch.lower;
                c.upper = ch.upper;
            }
        }
        c
    }
}

/// Everything a backtest consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T> {
    pub model: MarketModel<T>,
    pub signals: SignalSet<T>,
    /// `[t, i]`: return earned between step t and t+1 by positions held
    /// after trading at t.
    pub realized_returns: Array2<T>,
    pub constraints: Vec<ScheduledConstraint<T>>,
    pub dynamic: Option<DynamicModelParams<T>>,
    pub benchmark: Option<Array1<T>>,
    pub seed: u64,
}

impl<T: Scalar> Scenario<T> {
    pub fn steps(&self) -> usize {
        self.signals.steps()
    }

    pub fn n_assets(&self) -> usize {
        self.model.n_assets
    }

    pub fn constraints_at(&self, t: usize) -> Vec<ConstraintSpec<T>> {
        self.constraints.iter().map(|c| c.at(t)).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.model.validate()?;
        let n = self.model.n_assets;
        if self.signals.n_assets() != n {
            return Err(ScenarioError::Invalid {
                what: format!("signals carry {} assets, model has {n}", self.signals.n_assets()),
            });
        }
        if self.signals.steps() == 0 {
            return Err(ScenarioError::Invalid { what: "no signal steps".into() });
        }
        if self.realized_returns.shape() != [self.signals.steps(), n] {
            return Err(ScenarioError::Invalid {
                what: format!(
                    "returns are {:?}, expected [{}, {n}]",
                    self.realized_returns.shape(),
                    self.signals.steps()
                ),
            });
        }
        if self.realized_returns.iter().any(|v| !v.is_finite())
            || self.signals.g.iter().any(|v| !v.is_finite())
        {
            return Err(ScenarioError::Invalid { what: "non-finite signal or return".into() });
        }
        if let Some(b) = &self.benchmark {
            if b.len() != n {
                return Err(ScenarioError::Invalid {
                    what: format!("benchmark has {} weights, expected {n}", b.len()),
                });
            }
        }
        if let Some(d) = &self.dynamic {
            if d.phi.len() != self.signals.k_signals() {
                return Err(ScenarioError::Invalid {
                    what: "dynamic phi length does not match signal count".into(),
                });
            }
        }
        for c in &self.constraints {
            c.base.validate(n).map_err(|e| ScenarioError::Constraint {
                label: c.base.label.clone(),
                reason: e.to_string(),
            })?;
            for ch in &c.schedule {
                if !(ch.lower <= ch.upper) {
                    return Err(ScenarioError::Constraint {
                        label: c.base.label.clone(),
                        reason: format!("schedule at step {} has crossed bounds", ch.from_step),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Knobs for seeded random instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSpec {
    pub n_assets: usize,
    pub k_signals: usize,
    pub steps: usize,
    pub seed: u64,
    pub lambda_spread: f64,
    pub lambda_financing: f64,
    pub lambda_power32: f64,
    pub n_constraints: usize,
    pub correlated_sigma: bool,
}

impl RandomSpec {
    pub fn new(n_assets: usize, k_signals: usize, steps: usize, seed: u64) -> Self {
        RandomSpec {
            n_assets,
            k_signals,
            steps,
            seed,
            lambda_spread: 0.0,
            lambda_financing: 0.0,
            lambda_power32: 0.0,
            n_constraints: 0,
            correlated_sigma: true,
        }
    }
}

fn ar1_paths(r: &mut Rng, steps: usize, k: usize, n: usize, rho: &[f64], scale: &[f64]) -> Array3<f64> {
    let mut g = Array3::zeros((steps, k, n));
    let mut state = Array2::zeros((k, n));
    for kk in 0..k {
        for i in 0..n {
            state[[kk, i]] = r.normal();
        }
    }
    for t in 0..steps {
        for kk in 0..k {
            let innov = (1.0 - rho[kk] * rho[kk]).sqrt();
            for i in 0..n {
                state[[kk, i]] = rho[kk] * state[[kk, i]] + innov * r.normal();
                g[[t, kk, i]] = scale[kk] * state[[kk, i]];
            }
        }
    }
    g
}

/// Seeded AR(1) signal paths with matching noisy realized returns.
pub fn generate_paths(
    n: usize,
    steps: usize,
    seed: u64,
    rho: &[f64],
    scale: &[f64],
    return_noise: f64,
) -> (Array3<f64>, Array2<f64>) {
    let k = rho.len();
    let mut r = Rng::new(seed);
    let g = ar1_paths(&mut r, steps, k, n, rho, scale);
    let mut returns = Array2::zeros((steps, n));
    for t in 0..steps {
        for i in 0..n {
            let mut tot = 0.0;
            for kk in 0..k {
                tot += g[[t, kk, i]];
            }
            returns[[t, i]] = tot + return_noise * r.normal();
        }
    }
    (g, returns)
}

/// Seeded random instance used by the wide-coverage suites.
///
/// The power cost implies the separable engine, so requesting it forces a
/// diagonal risk model, per-asset bound constraints and no financing term.
pub fn generate_random(spec: &RandomSpec) -> Scenario<f64> {
    let n = spec.n_assets;
    let k = spec.k_signals;
    let mut r = Rng::new(spec.seed);
    let separable = spec.lambda_power32 > 0.0;

    let vols: Vec<f64> = (0..n).map(|_| r.range(0.15, 0.35)).collect();
    let sigma = if spec.correlated_sigma && !separable {
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                a[[i, j]] = 0.4 * r.normal();
            }
        }
        let mut s = a.dot(&a.t()) / (n as f64);
        for i in 0..n {
            s[[i, i]] += vols[i] * vols[i];
        }
        s
    } else {
        Array2::from_diag(&Array1::from_iter(vols.iter().map(|v| v * v)))
    };
    let gamma = r.range(0.5, 3.0);
    let quad = r.range(0.1, 1.5);

    let rho: Vec<f64> = (0..k).map(|_| r.range(0.3, 0.95)).collect();
    let scale: Vec<f64> = (0..k).map(|_| r.range(0.02, 0.08)).collect();
    let g = ar1_paths(&mut r, spec.steps, k, n, &rho, &scale);

    let mut returns = Array2::zeros((spec.steps, n));
    for t in 0..spec.steps {
        for i in 0..n {
            let mut tot = 0.0;
            for kk in 0..k {
                tot += g[[t, kk, i]];
            }
            returns[[t, i]] = tot + 0.05 * r.normal();
        }
    }

    let mut constraints = Vec::new();
    for ci in 0..spec.n_constraints {
        let lower = -r.range(0.2, 1.2);
        let upper = r.range(0.2, 1.2);
        let choices = if separable { 2 } else { 4 };
        let base = match r.below(choices) {
            0 => ConstraintSpec::trade_bound(n, r.below(n), lower, upper, &format!("c{ci}_trade")),
            1 => {
                ConstraintSpec::position_bound(n, r.below(n), lower, upper, &format!("c{ci}_pos"))
            }
            2 => {
                let v = Array1::from_iter((0..n).map(|_| r.normal() / (n as f64).sqrt()));
                ConstraintSpec::trade_exposure(v, lower, upper, &format!("c{ci}_texp"))
            }
            _ => {
                let v = Array1::from_iter((0..n).map(|_| r.normal() / (n as f64).sqrt()));
                ConstraintSpec::position_exposure(v, lower, upper, &format!("c{ci}_pexp"))
            }
        };
        constraints.push(ScheduledConstraint::fixed(base));
    }

    Scenario {
        model: MarketModel {
            n_assets: n,
            sigma,
            gamma,
            quad_cost: QuadCost::Proportional(quad),
            lambda_spread: spec.lambda_spread,
            lambda_financing: if separable { 0.0 } else { spec.lambda_financing },
            lambda_power32: spec.lambda_power32,
            impact: None,
        },
        signals: SignalSet {
            names: (0..k).map(|kk| format!("s{kk}")).collect(),
            g,
        },
        realized_returns: returns,
        constraints,
        dynamic: None,
        benchmark: None,
        seed: spec.seed,
    }
}

/// The standard 10-asset, 250-step demonstration: slow value and fast
/// momentum signals with anti-correlated innovations, a one-factor risk
/// model, a long-only book against an equal-weight benchmark and a net
/// exposure cap.
pub fn generate_case_study(seed: u64) -> Scenario<f64> {
    let n = 10;
    let steps = 250;
    let mut r = Rng::new(seed);

    let vols: Vec<f64> = (0..n).map(|_| r.range(0.15, 0.40)).collect();
    let mut sigma = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sigma[[i, j]] = if i == j { vols[i] * vols[i] } else { 0.3 * vols[i] * vols[j] };
        }
    }

    let (rho_v, rho_m) = (0.97, 0.60);
    let (scale_v, scale_m) = (0.045, 0.030);
    let mut g = Array3::zeros((steps, 2, n));
    let mut sv = vec![0.0; n];
    let mut sm = vec![0.0; n];
    for i in 0..n {
        sv[i] = r.normal();
        sm[i] = r.normal();
    }
    let (iv, im) = ((1.0 - rho_v * rho_v as f64).sqrt(), (1.0 - rho_m * rho_m as f64).sqrt());
    for t in 0..steps {
        for i in 0..n {
            let shock = r.normal();
            let own = r.normal();
            sv[i] = rho_v * sv[i] + iv * shock;
            // momentum leans against the value shock
            sm[i] = rho_m * sm[i] + im * (-0.5 * shock + 0.75_f64.sqrt() * own);
            g[[t, 0, i]] = scale_v * sv[i];
            g[[t, 1, i]] = scale_m * sm[i];
        }
    }

    let mut returns = Array2::zeros((steps, n));
    for t in 0..steps {
        for i in 0..n {
            returns[[t, i]] = g[[t, 0, i]] + g[[t, 1, i]] + 0.5 * vols[i] * r.normal();
        }
    }

    let bench = 1.0 / n as f64;
    let mut constraints: Vec<ScheduledConstraint<f64>> = (0..n)
        .map(|i| ScheduledConstraint {
            base: ConstraintSpec::position_bound(
                n,
                i,
                -bench,
                f64::INFINITY,
                &format!("long_only[{i}]"),
            ),
            schedule: Vec::new(),
            group: Some("long_only".into()),
        })
        .collect();
    constraints.push(ScheduledConstraint {
        base: ConstraintSpec::position_exposure(
            Array1::from_elem(n, 1.0),
            -0.05,
            0.05,
            "net_exposure",
        ),
        schedule: Vec::new(),
        group: Some("net_exposure".into()),
    });

    Scenario {
        model: MarketModel {
            n_assets: n,
            sigma,
            gamma: 2.0,
            quad_cost: QuadCost::Proportional(0.5),
            lambda_spread: 0.002,
            lambda_financing: 0.0,
            lambda_power32: 0.0,
            impact: None,
        },
        signals: SignalSet { names: vec!["value".into(), "momentum".into()], g },
        realized_returns: returns,
        constraints,
        dynamic: None,
        benchmark: Some(Array1::from_elem(n, bench)),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scenarios_validate() {
        for seed in 0..20 {
            let mut spec = RandomSpec::new(1 + (seed as usize % 5), 1 + (seed as usize % 3), 30, seed);
            spec.n_constraints = seed as usize % 4;
            spec.lambda_spread = if seed % 2 == 0 { 0.02 } else { 0.0 };
            spec.lambda_financing = if seed % 3 == 0 { 0.01 } else { 0.0 };
            generate_random(&spec).validate().unwrap();
        }
    }

    #[test]
    fn power_cost_instances_stay_separable() {
        let mut spec = RandomSpec::new(4, 2, 10, 11);
        spec.lambda_power32 = 0.3;
        spec.lambda_financing = 0.5;
        spec.n_constraints = 3;
        let sc = generate_random(&spec);
        sc.validate().unwrap();
        assert_eq!(sc.model.lambda_financing, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(sc.model.sigma[[i, j]], 0.0);
                }
            }
        }
        for c in &sc.constraints {
            assert_eq!(c.base.v.iter().filter(|x| **x != 0.0).count(), 1);
        }
    }

    #[test]
    fn case_study_shape_and_anticorrelation() {
        let sc = generate_case_study(3);
        sc.validate().unwrap();
        assert_eq!(sc.steps(), 250);
        assert_eq!(sc.n_assets(), 10);
        assert_eq!(sc.constraints.len(), 11);
        // innovations of the two signals should correlate negatively
        let g = &sc.signals.g;
        let (mut num, mut dv, mut dm) = (0.0, 0.0, 0.0);
        for t in 1..250 {
            for i in 0..10 {
                let ev = g[[t, 0, i]] - 0.97 * g[[t - 1, 0, i]];
                let em = g[[t, 1, i]] - 0.60 * g[[t - 1, 1, i]];
                num += ev * em;
                dv += ev * ev;
                dm += em * em;
            }
        }
        assert!(num / (dv * dm).sqrt() < -0.3);
    }

    #[test]
    fn schedules_switch_bounds_at_the_right_step() {
        let base = ConstraintSpec::trade_bound(2, 0, -1.0, 1.0, "b");
        let c = ScheduledConstraint {
            base,
            schedule: vec![BoundChange { from_step: 5, lower: -0.5, upper: 0.5 }],
            group: None,
        };
        assert_eq!(c.at(4).upper, 1.0);
        assert_eq!(c.at(5).upper, 0.5);
        assert_eq!(c.at(9).lower, -0.5);
    }
}
