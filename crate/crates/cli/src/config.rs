//! Command configuration files. The format follows the extension: `.toml`
//! is TOML, anything else is read as JSON.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use fairexp_core::{
    AllocationProblem, DesignPolicy, DgpSpec, ExperimentConfig, MonteCarloConfig, SolverOptions,
    StageSchedule,
};

/// Reading or checking a configuration failed; maps to the usage exit code.
#[derive(Debug)]
pub struct ConfigError(pub anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn read_value(path: &Path) -> anyhow::Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let is_toml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let table: toml::Table = toml::from_str(&text)
            .with_context(|| format!("{} is not valid TOML", path.display()))?;
        Ok(serde_json::to_value(table)?)
    } else {
        serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))
    }
}

fn parse<T: for<'de> Deserialize<'de>>(value: Value, path: &Path) -> anyhow::Result<T> {
    serde_json::from_value(value)
        .with_context(|| format!("invalid configuration in {}", path.display()))
}

/// Input of `solve`: either a bare problem or `{ problem, solver }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub problem: AllocationProblem,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl SolveConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let load = || -> anyhow::Result<Self> {
            let value = read_value(path)?;
            let cfg = if value.get("problem").is_some() {
                parse(value, path)?
            } else {
                SolveConfig {
                    problem: parse(value, path)?,
                    solver: SolverOptions::default(),
                }
            };
            cfg.problem.validate()?;
            ExperimentConfig {
                solver: cfg.solver,
                ..ExperimentConfig::with_groups(1)
            }
            .validate()?;
            Ok(cfg)
        };
        load().map_err(ConfigError)
    }
}

/// Input of `trial`. The schedule is either explicit or a burn-in stage of
/// `initial_stage` participants followed by single arrivals up to `stages`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub experiment: ExperimentConfig,
    pub dgp: DgpSpec,
    #[serde(default = "default_design")]
    pub design: DesignPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StageSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_design() -> DesignPolicy {
    DesignPolicy::FairAdaptive
}

impl TrialConfig {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, ConfigError> {
        let load = || -> anyhow::Result<Self> {
            let mut cfg: TrialConfig = parse(read_value(path)?, path)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            Ok(cfg)
        };
        load().map_err(ConfigError)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.experiment.validate()?;
        self.dgp.validate()?;
        self.design.validate()?;
        if self.dgp.groups() != self.experiment.m {
            bail!(
                "dgp: has {} groups but experiment.m is {}",
                self.dgp.groups(),
                self.experiment.m
            );
        }
        self.resolved_schedule()?;
        Ok(())
    }

    pub fn resolved_schedule(&self) -> anyhow::Result<StageSchedule> {
        match (&self.schedule, self.initial_stage, self.stages) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                bail!(
                    "schedule: give either an explicit schedule or initial_stage/stages, not both"
                )
            }
            (Some(s), None, None) => Ok(s.clone()),
            (None, initial, stages) => {
                let initial = initial.unwrap_or(40);
                if initial == 0 {
                    bail!("initial_stage: must enroll at least one participant");
                }
                Ok(StageSchedule::burn_in(initial, stages.unwrap_or(400))?)
            }
        }
    }
}

pub fn load_montecarlo(path: &Path, seed: Option<u64>) -> Result<MonteCarloConfig, ConfigError> {
    let load = || -> anyhow::Result<MonteCarloConfig> {
        let mut cfg: MonteCarloConfig = parse(read_value(path)?, path)?;
        if let Some(seed) = seed {
            cfg.base_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    };
    load().map_err(ConfigError)
}
