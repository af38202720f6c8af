//! The stage loop: allocate from the past, enroll, observe, update; then
//! report effects with standard errors and confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::allocator::{AllocationProblem, AllocationVector};
use crate::config::{DeltaMode, EffectScale, ExperimentConfig, Participant, StageSchedule};
use crate::designs::{assignment_probabilities, Assignment, DesignPolicy, TrueParams};
use crate::error::{Error, Result};
use crate::estimators::{Arm, TrialState};

/// Both potential outcomes of one arriving participant; only one is revealed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialOutcomes {
    pub group: usize,
    pub control: f64,
    pub treated: f64,
}

pub trait OutcomeSource {
    fn draw(&mut self) -> PotentialOutcomes;
}

impl<F: FnMut() -> PotentialOutcomes> OutcomeSource for F {
    fn draw(&mut self) -> PotentialOutcomes {
        self()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// One-based stage index.
    pub stage: usize,
    pub allocation: AllocationVector,
    pub participants: Vec<Participant>,
    /// Estimates after absorbing this stage.
    pub effects: Vec<Option<f64>>,
    pub var_treated: Vec<Option<f64>>,
    pub var_control: Vec<Option<f64>>,
    pub proportions: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solver_converged: Option<bool>,
    /// Program solved to produce `allocation` (fair adaptive only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub problem: Option<AllocationProblem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub effect: f64,
    /// `v^2`; the estimator's variance is `v^2 / N`.
    pub variance: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl EffectEstimate {
    fn new(effect: f64, variance: f64, n: u64, z: f64) -> Self {
        let std_error = variance.max(0.0).sqrt() / (n as f64).sqrt();
        EffectEstimate {
            effect,
            variance,
            std_error,
            ci_lower: effect - z * std_error,
            ci_upper: effect + z * std_error,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lower <= truth && truth <= self.ci_upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupFlag {
    NotObserved,
    EmptyArm,
    NonPositiveMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInference {
    pub group: usize,
    pub count: u64,
    pub proportion: f64,
    pub treated_fraction: Option<f64>,
    pub estimate: Option<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<GroupFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub n: u64,
    pub alpha: f64,
    pub z: f64,
    pub effect_scale: EffectScale,
    pub groups: Vec<GroupInference>,
    pub overall: Option<EffectEstimate>,
    /// Groups left out of the overall estimate.
    pub excluded_groups: Vec<usize>,
}

impl InferenceReport {
    pub fn group_estimate(&self, j: usize) -> Option<&EffectEstimate> {
        self.groups[j].estimate.as_ref()
    }
}

/// A group is handed to the solver once both of its arms hold at least
/// `min_cell_count` observations with finite variances.
pub fn active_groups(state: &TrialState, cfg: &ExperimentConfig) -> Vec<bool> {
    (0..state.groups())
        .map(|j| {
            [Arm::Control, Arm::Treated].iter().all(|&arm| {
                let cell = state.cell(j, arm);
                cell.count() >= cfg.min_cell_count && cell.variance().is_some_and(|v| v.is_finite())
            })
        })
        .collect()
}

/// Effects and slack that enter the welfare constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfareInputs {
    pub effects: Vec<Option<f64>>,
    pub delta: f64,
}

/// `sqrt(ln N / N)`.
pub fn recommended_delta(n: u64) -> f64 {
    let n = n as f64;
    (n.ln() / n).sqrt()
}

pub fn welfare_slack(state: &TrialState, cfg: &ExperimentConfig) -> Result<WelfareInputs> {
    let n = state.total_enrolled();
    if n == 0 {
        return Err(Error::NoEnrollment);
    }
    let raw = |j| state.group_effect(j, cfg.effect_scale);
    let m = state.groups();
    Ok(match cfg.delta_mode {
        DeltaMode::Recommended => WelfareInputs {
            effects: (0..m).map(raw).collect(),
            delta: recommended_delta(n),
        },
        DeltaMode::Custom(delta) => WelfareInputs {
            effects: (0..m).map(raw).collect(),
            delta,
        },
        DeltaMode::TStatistic => WelfareInputs {
            effects: (0..m)
                .map(|j| {
                    let effect = raw(j)?;
                    let sd = group_variance(state, j, cfg.effect_scale)?.sqrt();
                    (sd > 0.0 && sd.is_finite()).then(|| effect / sd)
                })
                .collect(),
            delta: recommended_delta(n),
        },
    })
}

/// `v_j^2 = (1/p_j) (s1^2 / e_j + s0^2 / (1 - e_j))` with `e_j` the realized
/// treated fraction; on the log scale each arm term is divided by its
/// squared mean.
pub fn group_variance(state: &TrialState, j: usize, scale: EffectScale) -> Option<f64> {
    let p = state.group_proportion(j)?;
    let e = state.treated_fraction(j)?;
    let var1 = state.arm_variance(j, Arm::Treated)?;
    let var0 = state.arm_variance(j, Arm::Control)?;
    if p <= 0.0 || e <= 0.0 || e >= 1.0 {
        return None;
    }
    let (scale1, scale0) = match scale {
        EffectScale::MeanDifference => (1.0, 1.0),
        EffectScale::LogRelativeRisk => {
            let mu1 = state.arm_mean(j, Arm::Treated)?;
            let mu0 = state.arm_mean(j, Arm::Control)?;
            if mu1 <= 0.0 || mu0 <= 0.0 {
                return None;
            }
            (mu1 * mu1, mu0 * mu0)
        }
    };
    Some((var1 / (e * scale1) + var0 / ((1.0 - e) * scale0)) / p)
}

pub fn normal_quantile(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// Group and overall effects, variances and confidence intervals from the
/// final state.
pub fn finalize_inference(state: &TrialState, cfg: &ExperimentConfig) -> Result<InferenceReport> {
    let n = state.total_enrolled();
    if n == 0 {
        return Err(Error::NoEnrollment);
    }
    let z = normal_quantile(cfg.alpha);
    let scale = cfg.effect_scale;
    let m = state.groups();

    let groups: Vec<GroupInference> = (0..m)
        .map(|j| {
            let count = state.group_count(j);
            let both_arms =
                state.cell(j, Arm::Treated).count() > 0 && state.cell(j, Arm::Control).count() > 0;
            let estimate = match (
                state.group_effect(j, scale),
                group_variance(state, j, scale),
            ) {
                (Some(effect), Some(var)) => Some(EffectEstimate::new(effect, var, n, z)),
                _ => None,
            };
            let flag = if count == 0 {
                Some(GroupFlag::NotObserved)
            } else if !both_arms {
                Some(GroupFlag::EmptyArm)
            } else if estimate.is_none() {
                Some(GroupFlag::NonPositiveMean)
            } else {
                None
            };
            GroupInference {
                group: j,
                count,
                proportion: state.group_proportion(j).unwrap_or(0.0),
                treated_fraction: state.treated_fraction(j),
                estimate,
                flag,
            }
        })
        .collect();

    let (overall, excluded_groups) = match scale {
        EffectScale::MeanDifference => overall_mean_difference(&groups, n, z),
        EffectScale::LogRelativeRisk => overall_log_relative_risk(state, &groups, n, z),
    };

    Ok(InferenceReport {
        n,
        alpha: cfg.alpha,
        z,
        effect_scale: scale,
        groups,
        overall,
        excluded_groups,
    })
}

/// Weights of the included groups, renormalized to sum to one.
fn included_weights(
    groups: &[GroupInference],
    include: impl Fn(&GroupInference) -> bool,
) -> (Vec<(usize, f64)>, Vec<usize>) {
    let (inc, exc): (Vec<_>, Vec<_>) = groups.iter().partition(|g| include(g));
    let total: f64 = inc.iter().map(|g| g.proportion).sum();
    let weights = inc
        .iter()
        .map(|g| (g.group, g.proportion / total))
        .collect();
    let excluded = exc.iter().map(|g| g.group).collect();
    (weights, excluded)
}

/// `tau = sum q_j tau_j`, `v^2 = sum q_j^2 v_j^2 + sum q_j (tau_j - tau)^2`.
fn overall_mean_difference(
    groups: &[GroupInference],
    n: u64,
    z: f64,
) -> (Option<EffectEstimate>, Vec<usize>) {
    let (weights, excluded) = included_weights(groups, |g| g.estimate.is_some());
    if weights.is_empty() {
        return (None, excluded);
    }
    let est = |j: usize| groups[j].estimate.unwrap();
    let tau: f64 = weights.iter().map(|&(j, q)| q * est(j).effect).sum();
    let within: f64 = weights.iter().map(|&(j, q)| q * q * est(j).variance).sum();
    let between: f64 = weights
        .iter()
        .map(|&(j, q)| q * (est(j).effect - tau).powi(2))
        .sum();
    (
        Some(EffectEstimate::new(tau, within + between, n, z)),
        excluded,
    )
}

/// Plug-in `ln(sum q_j mean1_j) - ln(sum q_j mean0_j)` with a delta-method
/// variance that accounts for both arm sampling and group-share sampling.
fn overall_log_relative_risk(
    state: &TrialState,
    groups: &[GroupInference],
    n: u64,
    z: f64,
) -> (Option<EffectEstimate>, Vec<usize>) {
    let (weights, excluded) = included_weights(groups, |g| {
        g.count > 0 && g.treated_fraction.is_some_and(|e| e > 0.0 && e < 1.0)
    });
    if weights.is_empty() {
        return (None, excluded);
    }
    struct Cell {
        q: f64,
        p: f64,
        e: f64,
        mu1: f64,
        mu0: f64,
        var1: f64,
        var0: f64,
    }
    let cells: Vec<Cell> = weights
        .iter()
        .map(|&(j, q)| Cell {
            q,
            p: groups[j].proportion,
            e: groups[j].treated_fraction.unwrap(),
            mu1: state.arm_mean(j, Arm::Treated).unwrap(),
            mu0: state.arm_mean(j, Arm::Control).unwrap(),
            var1: state.arm_variance(j, Arm::Treated).unwrap(),
            var0: state.arm_variance(j, Arm::Control).unwrap(),
        })
        .collect();
    let a: f64 = cells.iter().map(|c| c.q * c.mu1).sum();
    let b: f64 = cells.iter().map(|c| c.q * c.mu0).sum();
    if a <= 0.0 || b <= 0.0 {
        return (None, excluded);
    }
    let var_a: f64 = cells
        .iter()
        .map(|c| c.q * c.q / c.p * c.var1 / c.e + c.q * (c.mu1 - a).powi(2))
        .sum();
    let var_b: f64 = cells
        .iter()
        .map(|c| c.q * c.q / c.p * c.var0 / (1.0 - c.e) + c.q * (c.mu0 - b).powi(2))
        .sum();
    let cov: f64 = cells.iter().map(|c| c.q * (c.mu1 - a) * (c.mu0 - b)).sum();
    let variance = var_a / (a * a) + var_b / (b * b) - 2.0 * cov / (a * b);
    (
        Some(EffectEstimate::new(a.ln() - b.ln(), variance, n, z)),
        excluded,
    )
}

/// A trial in progress. Stages are run one at a time, so the state can be
/// inspected (or reported on) between stages.
pub struct Trial<'a> {
    cfg: &'a ExperimentConfig,
    policy: &'a DesignPolicy,
    truth: Option<&'a TrueParams>,
    state: TrialState,
    rng: ChaCha8Rng,
}

impl<'a> Trial<'a> {
    pub fn new(
        cfg: &'a ExperimentConfig,
        policy: &'a DesignPolicy,
        truth: Option<&'a TrueParams>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        policy.validate()?;
        if policy.needs_truth() && truth.is_none() {
            return Err(Error::MissingTrueParams(policy.name()));
        }
        Ok(Trial {
            cfg,
            policy,
            truth,
            state: TrialState::new(cfg.m),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> &TrialState {
        &self.state
    }

    /// Allocation for the next stage: one half before any data, otherwise the
    /// policy evaluated on the history so far.
    pub fn next_assignment(&self) -> Result<Assignment> {
        if self.state.stage() == 0 {
            return Ok(Assignment {
                probabilities: AllocationVector::half(self.cfg.m),
                problem: None,
                solver_converged: None,
            });
        }
        assignment_probabilities(self.policy, &self.state, self.cfg, self.truth)
    }

    pub fn run_stage(
        &mut self,
        size: usize,
        source: &mut dyn OutcomeSource,
    ) -> Result<StageRecord> {
        let assignment = self.next_assignment()?;
        let e = assignment.probabilities.as_slice();
        let mut participants = Vec::with_capacity(size);
        for _ in 0..size {
            let draw = source.draw();
            if draw.group >= self.cfg.m {
                return Err(Error::GroupOutOfRange {
                    index: draw.group,
                    groups: self.cfg.m,
                });
            }
            let u: f64 = self.rng.random();
            let treated = u < e[draw.group];
            participants.push(Participant {
                group: draw.group,
                treated,
                outcome: if treated { draw.treated } else { draw.control },
            });
        }
        self.state.update(&participants)?;
        let m = self.cfg.m;
        let s = &self.state;
        Ok(StageRecord {
            stage: s.stage(),
            allocation: assignment.probabilities,
            participants,
            effects: (0..m)
                .map(|j| s.group_effect(j, self.cfg.effect_scale))
                .collect(),
            var_treated: (0..m).map(|j| s.arm_variance(j, Arm::Treated)).collect(),
            var_control: (0..m).map(|j| s.arm_variance(j, Arm::Control)).collect(),
            proportions: s.group_proportions().unwrap_or_default(),
            solver_converged: assignment.solver_converged,
            problem: assignment.problem,
        })
    }

    pub fn report(&self) -> Result<InferenceReport> {
        finalize_inference(&self.state, self.cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRun {
    pub stages: Vec<StageRecord>,
    pub report: InferenceReport,
}

/// Runs every stage of `schedule` and reports. Deterministic given `seed`
/// (which drives the treatment coin flips) and the outcome source.
pub fn run_trial(
    cfg: &ExperimentConfig,
    schedule: &StageSchedule,
    policy: &DesignPolicy,
    truth: Option<&TrueParams>,
    source: &mut dyn OutcomeSource,
    seed: u64,
) -> Result<TrialRun> {
    let mut trial = Trial::new(cfg, policy, truth, seed)?;
    let stages = schedule
        .sizes()
        .iter()
        .map(|&n| trial.run_stage(n, source))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialRun {
        stages,
        report: trial.report()?,
    })
}
