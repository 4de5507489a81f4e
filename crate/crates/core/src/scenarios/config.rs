//! TOML run configuration.
//!
//! A config either points at signal/return CSVs under `[data]` or asks for
//! a seeded scenario under `[generate]`. Model terms, constraints (with
//! optional bound schedules and attribution groups), dynamic scaling and a
//! benchmark all live here; the command line can override the mode, seed
//! and output directory.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use serde::Deserialize;
use thiserror::Error;

use crate::attribution::Mode;
use crate::model::{DynamicModelParams, Impact, MarketModel, QuadCost, SignalSet};
use crate::qpsolver::ConstraintSpec;
use crate::scenarios::{
    csv, generate_case_study, BoundChange, Scenario, ScheduledConstraint,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config: {what}")]
    Invalid { what: String },
    #[error(transparent)]
    Csv(#[from] csv::CsvError),
    #[error(transparent)]
    Scenario(#[from] crate::scenarios::ScenarioError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub run: Option<RunSection>,
    pub dynamic: Option<DynamicSection>,
    pub signals: Option<SignalsSection>,
    pub generate: Option<GenerateSection>,
    pub data: Option<DataSection>,
    pub benchmark: Option<BenchmarkSection>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_assets: usize,
    pub gamma: f64,
    pub sigma: Option<Vec<Vec<f64>>>,
    pub sigma_diagonal: Option<Vec<f64>>,
    pub quad_cost: Option<f64>,
    pub quad_cost_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub lambda_spread: f64,
    #[serde(default)]
    pub lambda_financing: f64,
    #[serde(default)]
    pub lambda_power32: f64,
    pub impact: Option<ImpactSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactSection {
    pub decay: Vec<Vec<f64>>,
    pub gain: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mode: Option<String>,
    pub steps: Option<usize>,
    pub out_dir: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicSection {
    pub phi: Vec<f64>,
    pub a: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalsSection {
    pub names: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub seed: u64,
    pub steps: Option<usize>,
    /// Replace everything with the built-in 10-asset demonstration.
    #[serde(default)]
    pub case_study: bool,
    pub rho: Option<Vec<f64>>,
    pub scale: Option<Vec<f64>>,
    pub return_noise: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub signals: String,
    pub returns: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub weights: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub kind: String,
    pub asset: Option<usize>,
    pub v: Option<Vec<f64>>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub label: Option<String>,
    pub group: Option<String>,
    #[serde(default)]
    pub schedule: Vec<ScheduleSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub from_step: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// A parsed config resolved into a runnable scenario.
#[derive(Debug)]
pub struct LoadedRun {
    pub scenario: Scenario<f64>,
    pub mode: Mode,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_mode(s: &str) -> Option<Mode> {
    match s {
        "signalwise" | "signal-wise" => Some(Mode::SignalWise),
        "constraint-portfolios" | "grouped" => Some(Mode::ConstraintPortfolios),
        "unconstrained" => Some(Mode::Unconstrained),
        _ => None,
    }
}

fn matrix(rows: &[Vec<f64>], n: usize, what: &str) -> Result<Array2<f64>, ConfigError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(ConfigError::Invalid { what: format!("{what} must be {n}x{n}") });
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
}

fn build_model(section: &ModelSection) -> Result<MarketModel<f64>, ConfigError> {
    let n = section.n_assets;
    let sigma = match (&section.sigma, &section.sigma_diagonal) {
        (Some(rows), None) => matrix(rows, n, "sigma")?,
        (None, Some(diag)) => {
            if diag.len() != n {
                return Err(ConfigError::Invalid {
                    what: format!("sigma_diagonal must have {n} entries"),
                });
            }
            Array2::from_diag(&Array1::from_vec(diag.clone()))
        }
        _ => {
            return Err(ConfigError::Invalid {
                what: "specify exactly one of sigma, sigma_diagonal".into(),
            })
        }
    };
    let quad_cost = match (&section.quad_cost, &section.quad_cost_matrix) {
        (Some(l), None) => QuadCost::Proportional(*l),
        (None, Some(rows)) => QuadCost::Matrix(matrix(rows, n, "quad_cost_matrix")?),
        (None, None) => QuadCost::Proportional(0.0),
        _ => {
            return Err(ConfigError::Invalid {
                what: "specify at most one of quad_cost, quad_cost_matrix".into(),
            })
        }
    };
    let impact = match &section.impact {
        Some(im) => Some(Impact {
            decay: matrix(&im.decay, n, "impact.decay")?,
            gain: matrix(&im.gain, n, "impact.gain")?,
        }),
        None => None,
    };
    Ok(MarketModel {
        n_assets: n,
        sigma,
        gamma: section.gamma,
        quad_cost,
        lambda_spread: section.lambda_spread,
        lambda_financing: section.lambda_financing,
        lambda_power32: section.lambda_power32,
        impact,
    })
}

fn build_constraint(
    section: &ConstraintSection,
    n: usize,
    index: usize,
) -> Result<ScheduledConstraint<f64>, ConfigError> {
    let lower = section.lower.unwrap_or(f64::NEG_INFINITY);
    let upper = section.upper.unwrap_or(f64::INFINITY);
    let label = section
        .label
        .clone()
        .unwrap_or_else(|| format!("user{index}"));
    let need_asset = || {
        section.asset.ok_or_else(|| ConfigError::Invalid {
            what: format!("constraint '{label}' needs an asset index"),
        })
    };
    let need_v = || -> Result<Array1<f64>, ConfigError> {
        let v = section.v.as_ref().ok_or_else(|| ConfigError::Invalid {
            what: format!("constraint '{label}' needs a weight vector v"),
        })?;
        if v.len() != n {
            return Err(ConfigError::Invalid {
                what: format!("constraint '{label}': v must have {n} entries"),
            });
        }
        Ok(Array1::from_vec(v.clone()))
    };
    let base = match section.kind.as_str() {
        "trade_bound" => ConstraintSpec::trade_bound(n, need_asset()?, lower, upper, &label),
        "position_bound" => ConstraintSpec::position_bound(n, need_asset()?, lower, upper, &label),
        "trade_exposure" => ConstraintSpec::trade_exposure(need_v()?, lower, upper, &label),
        "position_exposure" => ConstraintSpec::position_exposure(need_v()?, lower, upper, &label),
        other => {
            return Err(ConfigError::Invalid {
                what: format!("constraint '{label}': unknown kind '{other}'"),
            })
        }
    };
    let schedule = section
        .schedule
        .iter()
        .map(|s| BoundChange {
            from_step: s.from_step,
            lower: s.lower.unwrap_or(f64::NEG_INFINITY),
            upper: s.upper.unwrap_or(f64::INFINITY),
        })
        .collect();
    Ok(ScheduledConstraint { base, schedule, group: section.group.clone() })
}

pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        reason: e.to_string(),
    })
}

/// Resolve a config file into a validated scenario plus run settings.
pub fn load_run(path: &Path) -> Result<LoadedRun, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let config = parse_config(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new("."));
    build_run(&config, base)
}

pub fn build_run(config: &RunConfig, base_dir: &Path) -> Result<LoadedRun, ConfigError> {
    let mode = match config.run.as_ref().and_then(|r| r.mode.as_deref()) {
        Some(s) => parse_mode(s).ok_or_else(|| ConfigError::Invalid {
            what: format!("unknown mode '{s}'"),
        })?,
        None => Mode::SignalWise,
    };
    let out_dir = config
        .run
        .as_ref()
        .and_then(|r| r.out_dir.as_ref())
        .map(|d| base_dir.join(d));

    if config.generate.as_ref().is_some_and(|g| g.case_study) {
        let seed = config.generate.as_ref().unwrap().seed;
        let scenario = generate_case_study(seed);
        scenario.validate()?;
        return Ok(LoadedRun { scenario, mode, out_dir });
    }

    let model = build_model(&config.model)?;
    let n = model.n_assets;

    let (signals, realized_returns, seed) = match (&config.data, &config.generate) {
        (Some(data), None) => {
            let signals = csv::read_signals_csv(&base_dir.join(&data.signals))?;
            let returns = csv::read_returns_csv(&base_dir.join(&data.returns))?;
            if let Some(want) = &config.signals {
                if want.names != signals.names {
                    return Err(ConfigError::Invalid {
                        what: format!(
                            "signal files carry {:?}, config expects {:?}",
                            signals.names, want.names
                        ),
                    });
                }
            }
            (signals, returns, 0)
        }
        (None, Some(gen)) => {
            let names = config
                .signals
                .as_ref()
                .map(|s| s.names.clone())
                .unwrap_or_else(|| vec!["signal0".to_string()]);
            let k = names.len();
            let steps = gen.steps.ok_or_else(|| ConfigError::Invalid {
                what: "[generate] needs steps (or case_study = true)".into(),
            })?;
            let rho = match &gen.rho {
                Some(r) if r.len() == k => r.clone(),
                Some(_) => {
                    return Err(ConfigError::Invalid {
                        what: "generate.rho must have one entry per signal".into(),
                    })
                }
                None => vec![0.9; k],
            };
            let scale = match &gen.scale {
                Some(s) if s.len() == k => s.clone(),
                Some(_) => {
                    return Err(ConfigError::Invalid {
                        what: "generate.scale must have one entry per signal".into(),
                    })
                }
                None => vec![0.05; k],
            };
            let (g, returns) = super::generate_paths(
                n,
                steps,
                gen.seed,
                &rho,
                &scale,
                gen.return_noise.unwrap_or(0.05),
            );
            (SignalSet { names, g }, returns, gen.seed)
        }
        _ => {
            return Err(ConfigError::Invalid {
                what: "specify exactly one of [data], [generate]".into(),
            })
        }
    };

    let constraints = config
        .constraints
        .iter()
        .enumerate()
        .map(|(i, c)| build_constraint(c, n, i))
        .collect::<Result<Vec<_>, _>>()?;

    let dynamic = config.dynamic.as_ref().map(|d| DynamicModelParams {
        phi: Array1::from_vec(d.phi.clone()),
        a: d.a,
    });

    let benchmark = match &config.benchmark {
        Some(b) => {
            if b.weights.len() != n {
                return Err(ConfigError::Invalid {
                    what: format!("benchmark needs {n} weights"),
                });
            }
            Some(Array1::from_vec(b.weights.clone()))
        }
        None => None,
    };

    let mut scenario = Scenario {
        model,
        signals,
        realized_returns,
        constraints,
        dynamic,
        benchmark,
        seed,
    };
    if let Some(limit) = config.run.as_ref().and_then(|r| r.steps) {
        if limit == 0 || limit > scenario.steps() {
            return Err(ConfigError::Invalid {
                what: format!("run.steps = {limit} outside 1..={}", scenario.steps()),
            });
        }
        scenario.signals.g = scenario.signals.g.slice(s![..limit, .., ..]).to_owned();
        scenario.realized_returns =
            scenario.realized_returns.slice(s![..limit, ..]).to_owned();
    }
    scenario.validate()?;
    Ok(LoadedRun { scenario, mode, out_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
n_assets = 2
gamma = 1.0
sigma_diagonal = [0.04, 0.09]
quad_cost = 0.5
lambda_spread = 0.01

[signals]
names = ["value", "momentum"]

[generate]
seed = 7
steps = 20

[run]
mode = "signalwise"

[[constraints]]
kind = "position_bound"
asset = 0
lower = -0.5
upper = 0.5
group = "limits"

[[constraints]]
kind = "trade_exposure"
v = [1.0, 1.0]
upper = 0.3
label = "net_trade"
"#;

    #[test]
    fn generated_run_parses_and_validates() {
        let config = parse_config(BASE, "test").unwrap();
        let run = build_run(&config, Path::new(".")).unwrap();
        assert_eq!(run.mode, Mode::SignalWise);
        assert_eq!(run.scenario.steps(), 20);
        assert_eq!(run.scenario.constraints.len(), 2);
        assert_eq!(run.scenario.constraints[0].group.as_deref(), Some("limits"));
        assert_eq!(run.scenario.constraints[1].base.label, "net_trade");
        assert!(run.scenario.constraints[1].base.lower.is_infinite());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = BASE.replace("[run]", "[run]\nturbo = true");
        assert!(matches!(parse_config(&bad, "test"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn missing_data_and_generate_is_invalid() {
        let config = parse_config(
            "[model]\nn_assets = 1\ngamma = 1.0\nsigma_diagonal = [0.04]\n",
            "test",
        )
        .unwrap();
        assert!(matches!(
            build_run(&config, Path::new(".")),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn step_limit_truncates() {
        let cfg = BASE.replace("mode = \"signalwise\"", "mode = \"signalwise\"\nsteps = 5");
        let config = parse_config(&cfg, "test").unwrap();
        let run = build_run(&config, Path::new(".")).unwrap();
        assert_eq!(run.scenario.steps(), 5);
    }

    #[test]
    fn case_study_shortcut() {
        let cfg = r#"
[model]
n_assets = 10
gamma = 2.0
sigma_diagonal = [1,1,1,1,1,1,1,1,1,1]

[generate]
seed = 3
case_study = true
"#;
        let config = parse_config(cfg, "test").unwrap();
        let run = build_run(&config, Path::new(".")).unwrap();
        assert_eq!(run.scenario.n_assets(), 10);
        assert_eq!(run.scenario.signals.names[0], "value");
    }
}
