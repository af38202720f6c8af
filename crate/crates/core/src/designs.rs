//! Treatment-assignment policies.

use serde::{Deserialize, Serialize};

use crate::allocator::{self, neyman, AllocationProblem, AllocationVector};
use crate::config::ExperimentConfig;
use crate::engine::{active_groups, welfare_slack};
use crate::error::{Error, Result};
use crate::estimators::{Arm, TrialState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignPolicy {
    /// Re-solve the constrained allocation program from the running estimates.
    FairAdaptive,
    /// Probability one half throughout.
    CompleteRandomization,
    /// Doubly adaptive biased coin steering each group's realized treated
    /// fraction towards its estimated Neyman target.
    Dbcd {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// Neyman allocation from the true arm standard deviations.
    OracleNeyman,
    /// The constrained program solved on true parameters with zero slack.
    OracleFair,
}

fn default_gamma() -> f64 {
    2.0
}

impl DesignPolicy {
    pub fn dbcd() -> Self {
        DesignPolicy::Dbcd {
            gamma: default_gamma(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DesignPolicy::FairAdaptive => "fair_adaptive",
            DesignPolicy::CompleteRandomization => "complete_randomization",
            DesignPolicy::Dbcd { .. } => "dbcd",
            DesignPolicy::OracleNeyman => "oracle_neyman",
            DesignPolicy::OracleFair => "oracle_fair",
        }
    }

    pub fn needs_truth(&self) -> bool {
        matches!(self, DesignPolicy::OracleNeyman | DesignPolicy::OracleFair)
    }

    pub fn validate(&self) -> Result<()> {
        if let DesignPolicy::Dbcd { gamma } = self {
            if !(gamma.is_finite() && *gamma >= 0.0) {
                return Err(Error::InvalidDesign(format!(
                    "dbcd gamma must be finite and nonnegative, got {gamma}"
                )));
            }
        }
        Ok(())
    }
}

/// Population quantities known to the oracle designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub weights: Vec<f64>,
    pub sd_treated: Vec<f64>,
    pub sd_control: Vec<f64>,
    /// Group effects on the configured scale.
    pub effects: Vec<Option<f64>>,
}

impl TrueParams {
    /// The zero-slack allocation program on these parameters.
    pub fn oracle_problem(&self, cfg: &ExperimentConfig) -> AllocationProblem {
        AllocationProblem {
            weights: self.weights.clone(),
            var_treated: self.sd_treated.iter().map(|s| s * s).collect(),
            var_control: self.sd_control.iter().map(|s| s * s).collect(),
            effects: self.effects.clone(),
            delta: 0.0,
            c1: cfg.c1,
            c2: cfg.c2,
            fixed_half: vec![],
        }
    }
}

/// Probabilities for the next stage plus what produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub probabilities: AllocationVector,
    /// The program handed to the solver (fair adaptive only).
    pub problem: Option<AllocationProblem>,
    pub solver_converged: Option<bool>,
}

impl Assignment {
    fn plain(probabilities: Vec<f64>) -> Self {
        Assignment {
            probabilities: AllocationVector(probabilities),
            problem: None,
            solver_converged: None,
        }
    }
}

/// DBCD allocation function
/// `g(x, rho) = rho (rho/x)^gamma / [rho (rho/x)^gamma + (1-rho) ((1-rho)/(1-x))^gamma]`.
pub fn dbcd_allocation(current: f64, target: f64, gamma: f64) -> f64 {
    if gamma == 0.0 || target <= 0.0 || target >= 1.0 {
        return target;
    }
    if current <= 0.0 {
        return 1.0;
    }
    if current >= 1.0 {
        return 0.0;
    }
    let a = target * (target / current).powf(gamma);
    let b = (1.0 - target) * ((1.0 - target) / (1.0 - current)).powf(gamma);
    a / (a + b)
}

/// Per-group treatment probabilities for the next stage, computed from the
/// history summarized in `state`. Groups whose arm variances are not yet
/// estimable get one half.
pub fn assignment_probabilities(
    policy: &DesignPolicy,
    state: &TrialState,
    cfg: &ExperimentConfig,
    truth: Option<&TrueParams>,
) -> Result<Assignment> {
    let m = cfg.m;
    let clip = |e: f64| e.clamp(cfg.c2, 1.0 - cfg.c2);
    match policy {
        DesignPolicy::CompleteRandomization => Ok(Assignment::plain(vec![0.5; m])),
        DesignPolicy::OracleNeyman => {
            let truth = truth.ok_or(Error::MissingTrueParams("oracle_neyman"))?;
            let e = (0..m)
                .map(|j| clip(neyman(truth.sd_treated[j], truth.sd_control[j])))
                .collect();
            Ok(Assignment::plain(e))
        }
        DesignPolicy::OracleFair => {
            let truth = truth.ok_or(Error::MissingTrueParams("oracle_fair"))?;
            let sol = allocator::solve(&truth.oracle_problem(cfg), &cfg.solver)?;
            Ok(Assignment {
                probabilities: sol.allocation,
                problem: None,
                solver_converged: Some(sol.converged),
            })
        }
        DesignPolicy::Dbcd { gamma } => {
            let active = active_groups(state, cfg);
            let e = (0..m)
                .map(|j| {
                    if !active[j] {
                        return 0.5;
                    }
                    let sd1 = state.arm_variance(j, Arm::Treated).unwrap_or(0.0).sqrt();
                    let sd0 = state.arm_variance(j, Arm::Control).unwrap_or(0.0).sqrt();
                    if sd1 + sd0 == 0.0 {
                        return 0.5;
                    }
                    let target = neyman(sd1, sd0);
                    let current = state.treated_fraction(j).unwrap_or(0.5);
                    clip(dbcd_allocation(current, target, *gamma))
                })
                .collect();
            Ok(Assignment::plain(e))
        }
        DesignPolicy::FairAdaptive => {
            if state.total_enrolled() == 0 {
                return Ok(Assignment::plain(vec![0.5; m]));
            }
            let active = active_groups(state, cfg);
            let welfare = welfare_slack(state, cfg)?;
            let problem = AllocationProblem {
                weights: state.group_proportions().ok_or(Error::NoEnrollment)?,
                var_treated: (0..m)
                    .map(|j| state.arm_variance(j, Arm::Treated).unwrap_or(0.0))
                    .collect(),
                var_control: (0..m)
                    .map(|j| state.arm_variance(j, Arm::Control).unwrap_or(0.0))
                    .collect(),
                effects: welfare.effects,
                delta: welfare.delta,
                c1: cfg.c1,
                c2: cfg.c2,
                fixed_half: active.iter().map(|a| !a).collect(),
            };
            let sol = allocator::solve(&problem, &cfg.solver)?;
            Ok(Assignment {
                probabilities: sol.allocation,
                problem: Some(problem),
                solver_converged: Some(sol.converged),
            })
        }
    }
}
