//! Fair adaptive experiments.
//!
//! Participants arrive in stages and belong to pre-specified groups. After
//! every stage the per-group treatment probabilities are re-solved from a
//! variance-minimization program constrained by envy-freeness (bounded spread
//! of probabilities across groups), participant welfare (groups that appear to
//! benefit lean towards treatment) and feasibility (probabilities bounded away
//! from 0 and 1). At the end, group-level and average treatment effects are
//! reported with standard errors and confidence intervals.
//!
//! Module map:
//!
//! - [`config`]: experiment configuration, stage schedules, participants.
//! - [`estimators`]: streaming per-(group, arm) statistics and trial state.
//! - [`allocator`]: the constrained allocation program and its grid oracle.
//! - [`designs`]: assignment policies (fair adaptive, complete randomization,
//!   DBCD, oracle variants).
//! - [`engine`]: the stage loop and final inference.
//! - [`sim`]: data-generating processes and the Monte Carlo harness.

pub mod allocator;
pub mod config;
pub mod designs;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod sim;

pub use allocator::{AllocationProblem, AllocationVector, Solution};
pub use config::{
    DeltaMode, EffectScale, ExperimentConfig, Participant, SolverOptions, StageSchedule,
};
pub use designs::{DesignPolicy, TrueParams};
pub use engine::{
    run_trial, InferenceReport, OutcomeSource, PotentialOutcomes, StageRecord, Trial,
};
pub use error::{Error, Result};
pub use estimators::{Arm, GroupArmStats, TrialState};
pub use sim::{DgpSpec, MonteCarloConfig, MonteCarloSummary};
