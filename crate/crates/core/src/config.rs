//! Experiment configuration, stage schedules and participant records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the welfare constraint is relaxed at each re-solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// `delta = sqrt(ln N / N)` applied to the raw group effect.
    Recommended,
    /// Effects are standardized by their estimated standard deviation and
    /// compared against `sqrt(ln N / N)`.
    TStatistic,
    /// A fixed, nonnegative slack.
    Custom(f64),
}

/// Scale on which treatment effects are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectScale {
    MeanDifference,
    LogRelativeRisk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Stop once an iterate moves less than this (sup norm).
    pub tol: f64,
    pub max_iter: usize,
    /// Cycle cap for the inner alternating-projection loop.
    pub projection_max_cycles: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 10_000,
            projection_max_cycles: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of groups.
    pub m: usize,
    /// Envy-freeness band: `|e_j - e_l| <= c1`.
    #[serde(default = "defaults::c1")]
    pub c1: f64,
    /// Feasibility margin: `c2 <= e_j <= 1 - c2`.
    #[serde(default = "defaults::c2")]
    pub c2: f64,
    /// Confidence intervals are built at level `1 - alpha`.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::delta_mode")]
    pub delta_mode: DeltaMode,
    #[serde(default = "defaults::effect_scale")]
    pub effect_scale: EffectScale,
    /// A group is handed to the solver once both arms hold at least this many
    /// observations.
    #[serde(default = "defaults::min_cell_count")]
    pub min_cell_count: u64,
    #[serde(default)]
    pub solver: SolverOptions,
}

mod defaults {
    use super::{DeltaMode, EffectScale};

    pub fn c1() -> f64 {
        0.2
    }
    pub fn c2() -> f64 {
        0.1
    }
    pub fn alpha() -> f64 {
        0.05
    }
    pub fn delta_mode() -> DeltaMode {
        DeltaMode::Recommended
    }
    pub fn effect_scale() -> EffectScale {
        EffectScale::MeanDifference
    }
    pub fn min_cell_count() -> u64 {
        2
    }
}

impl ExperimentConfig {
    /// Default configuration for `m` groups.
    pub fn with_groups(m: usize) -> Self {
        ExperimentConfig {
            m,
            c1: defaults::c1(),
            c2: defaults::c2(),
            alpha: defaults::alpha(),
            delta_mode: defaults::delta_mode(),
            effect_scale: defaults::effect_scale(),
            min_cell_count: defaults::min_cell_count(),
            solver: SolverOptions::default(),
        }
    }

    /// Every violated bound, with the offending field. Empty means valid.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field: &'static str, message: &str| {
            out.push(Violation {
                field,
                message: message.to_string(),
            })
        };
        if self.m < 1 {
            push("m", "m must be at least 1");
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            push("c1", "c1 must lie in (0,1)");
        }
        if !(self.c2 > 0.0 && self.c2 < 0.5) {
            push("c2", "c2 must lie in (0, 1/2)");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            push("alpha", "alpha must lie in (0,1)");
        }
        if let DeltaMode::Custom(d) = self.delta_mode {
            if !(d.is_finite() && d >= 0.0) {
                push("delta_mode", "custom delta must be finite and nonnegative");
            }
        }
        if self.min_cell_count < 2 {
            push("min_cell_count", "min_cell_count must be at least 2");
        }
        if !(self.solver.tol.is_finite() && self.solver.tol > 0.0) {
            push("solver.tol", "solver tolerance must be positive");
        }
        if self.solver.max_iter == 0 {
            push("solver.max_iter", "solver.max_iter must be at least 1");
        }
        if self.solver.projection_max_cycles == 0 {
            push(
                "solver.projection_max_cycles",
                "solver.projection_max_cycles must be at least 1",
            );
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(violations))
        }
    }
}

/// A single violated configuration bound.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

/// Outcome of [`validate_config`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_config(cfg: &ExperimentConfig) -> ValidationResult {
    ValidationResult {
        violations: cfg.violations(),
    }
}

/// Per-stage enrollment counts `n_1, ..., n_T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct StageSchedule {
    sizes: Vec<usize>,
}

impl StageSchedule {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidSchedule(
                "at least one stage is required".into(),
            ));
        }
        if let Some(t) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidSchedule(format!(
                "stage {} enrolls nobody",
                t + 1
            )));
        }
        Ok(StageSchedule { sizes })
    }

    /// `n_1 = initial`, then one participant per stage up to `stages` stages.
    pub fn burn_in(initial: usize, stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::InvalidSchedule(
                "at least one stage is required".into(),
            ));
        }
        let mut sizes = Vec::with_capacity(stages);
        sizes.push(initial);
        sizes.resize(stages, 1);
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn stages(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

impl TryFrom<Vec<usize>> for StageSchedule {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        StageSchedule::new(sizes)
    }
}

impl From<StageSchedule> for Vec<usize> {
    fn from(s: StageSchedule) -> Self {
        s.sizes
    }
}

/// One enrolled participant. Groups are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub group: usize,
    pub treated: bool,
    pub outcome: f64,
}
