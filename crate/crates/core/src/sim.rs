//! Data-generating processes and the Monte Carlo harness.
//!
//! Replication `r` draws its participants from a stream seeded by
//! `(base_seed, r, OUTCOME_STREAM)` and its coin flips from
//! `(base_seed, r, ASSIGNMENT_STREAM)`. Every design therefore sees the same
//! arriving participants and the same uniforms in replication `r`, and no
//! state is shared between replications. Each replication is run once up to
//! the largest stage count of the grid; smaller stage counts are read off as
//! checkpoints, which is exact because allocations only depend on the past.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator;
use crate::config::{EffectScale, ExperimentConfig};
use crate::designs::{DesignPolicy, TrueParams};
use crate::engine::{InferenceReport, OutcomeSource, PotentialOutcomes, Trial};
use crate::error::{Error, Result};
use crate::estimators::Arm;

const OUTCOME_STREAM: u64 = 0;
const ASSIGNMENT_STREAM: u64 = 1;

/// Largest constraint violation tolerated when auditing recorded allocations.
pub const AUDIT_TOL: f64 = 1e-8;

/// One atom of a discrete outcome distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeModel {
    /// `Y(d) | group j ~ N(mean_d[j], sd_d[j]^2)`.
    Gaussian {
        mean_treated: Vec<f64>,
        mean_control: Vec<f64>,
        sd_treated: Vec<f64>,
        sd_control: Vec<f64>,
    },
    /// `Y(d) | group j ~ Bernoulli(mean_d[j])`.
    Bernoulli {
        mean_treated: Vec<f64>,
        mean_control: Vec<f64>,
    },
    /// Arbitrary finite distributions per group and arm.
    Table {
        treated: Vec<Vec<Atom>>,
        control: Vec<Vec<Atom>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    /// Group shares; positive and summing to one.
    pub proportions: Vec<f64>,
    pub outcomes: OutcomeModel,
}

impl DgpSpec {
    /// Two Gaussian groups with effects (-3, 2).
    pub fn dgp1() -> Self {
        DgpSpec {
            proportions: vec![0.5, 0.5],
            outcomes: OutcomeModel::Gaussian {
                mean_treated: vec![1.0, 4.0],
                mean_control: vec![4.0, 2.0],
                sd_treated: vec![2.5, 1.2],
                sd_control: vec![1.5, 3.5],
            },
        }
    }

    /// Five Bernoulli groups; log relative risks (1.79, -0.92, 0, 0, -1.79).
    pub fn dgp2() -> Self {
        DgpSpec {
            proportions: vec![0.15, 0.25, 0.2, 0.25, 0.15],
            outcomes: OutcomeModel::Bernoulli {
                mean_treated: vec![0.6, 0.2, 0.3, 0.4, 0.1],
                mean_control: vec![0.1, 0.5, 0.3, 0.4, 0.6],
            },
        }
    }

    pub fn groups(&self) -> usize {
        self.proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.groups();
        let bad = |msg: String| Err(Error::InvalidDgp(msg));
        if m == 0 {
            return bad("at least one group is required".into());
        }
        if self
            .proportions
            .iter()
            .any(|&p| !(p.is_finite() && p > 0.0))
        {
            return bad("group proportions must be positive".into());
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("group proportions sum to {total}, not 1"));
        }
        let lengths_ok = |vs: &[&Vec<f64>]| vs.iter().all(|v| v.len() == m);
        match &self.outcomes {
            OutcomeModel::Gaussian {
                mean_treated,
                mean_control,
                sd_treated,
                sd_control,
            } => {
                if !lengths_ok(&[mean_treated, mean_control, sd_treated, sd_control]) {
                    return bad("gaussian parameters must have one entry per group".into());
                }
                if mean_treated
                    .iter()
                    .chain(mean_control)
                    .any(|x| !x.is_finite())
                {
                    return bad("gaussian means must be finite".into());
                }
                if sd_treated
                    .iter()
                    .chain(sd_control)
                    .any(|&s| !(s.is_finite() && s > 0.0))
                {
                    return bad("gaussian standard deviations must be positive".into());
                }
            }
            OutcomeModel::Bernoulli {
                mean_treated,
                mean_control,
            } => {
                if !lengths_ok(&[mean_treated, mean_control]) {
                    return bad("bernoulli means must have one entry per group".into());
                }
                if mean_treated
                    .iter()
                    .chain(mean_control)
                    .any(|&p| !(0.0..=1.0).contains(&p))
                {
                    return bad("bernoulli means must lie in [0, 1]".into());
                }
            }
            OutcomeModel::Table { treated, control } => {
                if treated.len() != m || control.len() != m {
                    return bad("outcome tables must have one entry per group".into());
                }
                for atoms in treated.iter().chain(control) {
                    if atoms.is_empty()
                        || atoms
                            .iter()
                            .any(|a| !a.value.is_finite() || a.prob.is_nan() || a.prob < 0.0)
                    {
                        return bad(
                            "outcome tables need finite values and nonnegative probabilities"
                                .into(),
                        );
                    }
                    let mass: f64 = atoms.iter().map(|a| a.prob).sum();
                    if (mass - 1.0).abs() > 1e-9 {
                        return bad(format!("outcome table mass is {mass}, not 1"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn arm_mean(&self, j: usize, arm: Arm) -> f64 {
        match (&self.outcomes, arm) {
            (OutcomeModel::Gaussian { mean_treated, .. }, Arm::Treated)
            | (OutcomeModel::Bernoulli { mean_treated, .. }, Arm::Treated) => mean_treated[j],
            (OutcomeModel::Gaussian { mean_control, .. }, Arm::Control)
            | (OutcomeModel::Bernoulli { mean_control, .. }, Arm::Control) => mean_control[j],
            (OutcomeModel::Table { treated, .. }, Arm::Treated) => table_mean(&treated[j]),
            (OutcomeModel::Table { control, .. }, Arm::Control) => table_mean(&control[j]),
        }
    }

    pub fn arm_variance(&self, j: usize, arm: Arm) -> f64 {
        match (&self.outcomes, arm) {
            (OutcomeModel::Gaussian { sd_treated, .. }, Arm::Treated) => sd_treated[j].powi(2),
            (OutcomeModel::Gaussian { sd_control, .. }, Arm::Control) => sd_control[j].powi(2),
            (OutcomeModel::Bernoulli { .. }, arm) => {
                let p = self.arm_mean(j, arm);
                p * (1.0 - p)
            }
            (OutcomeModel::Table { treated, .. }, Arm::Treated) => table_variance(&treated[j]),
            (OutcomeModel::Table { control, .. }, Arm::Control) => table_variance(&control[j]),
        }
    }

    /// Analytic group effects; `None` on the log scale for nonpositive means.
    pub fn true_group_effects(&self, scale: EffectScale) -> Vec<Option<f64>> {
        (0..self.groups())
            .map(|j| {
                effect_on_scale(
                    self.arm_mean(j, Arm::Treated),
                    self.arm_mean(j, Arm::Control),
                    scale,
                )
            })
            .collect()
    }

    /// Population effect: `sum p_j tau_j`, or the log ratio of the
    /// population arm means.
    pub fn true_overall_effect(&self, scale: EffectScale) -> Option<f64> {
        let mix = |arm| -> f64 {
            (0..self.groups())
                .map(|j| self.proportions[j] * self.arm_mean(j, arm))
                .sum()
        };
        effect_on_scale(mix(Arm::Treated), mix(Arm::Control), scale)
    }

    pub fn true_params(&self, scale: EffectScale) -> TrueParams {
        let m = self.groups();
        TrueParams {
            weights: self.proportions.clone(),
            sd_treated: (0..m)
                .map(|j| self.arm_variance(j, Arm::Treated).sqrt())
                .collect(),
            sd_control: (0..m)
                .map(|j| self.arm_variance(j, Arm::Control).sqrt())
                .collect(),
            effects: self.true_group_effects(scale),
        }
    }

    /// Group membership and both potential outcomes of one participant.
    /// Draw order: group, control outcome, treated outcome.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> PotentialOutcomes {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut group = self.groups() - 1;
        for (j, &p) in self.proportions.iter().enumerate() {
            acc += p;
            if u < acc {
                group = j;
                break;
            }
        }
        let control = self.draw_outcome(group, Arm::Control, rng);
        let treated = self.draw_outcome(group, Arm::Treated, rng);
        PotentialOutcomes {
            group,
            control,
            treated,
        }
    }

    fn draw_outcome<R: Rng + ?Sized>(&self, j: usize, arm: Arm, rng: &mut R) -> f64 {
        match &self.outcomes {
            OutcomeModel::Gaussian { .. } => {
                let sd = self.arm_variance(j, arm).sqrt();
                Normal::new(self.arm_mean(j, arm), sd)
                    .expect("validated standard deviation")
                    .sample(rng)
            }
            OutcomeModel::Bernoulli { .. } => {
                let u: f64 = rng.random();
                if u < self.arm_mean(j, arm) {
                    1.0
                } else {
                    0.0
                }
            }
            OutcomeModel::Table { treated, control } => {
                let atoms = match arm {
                    Arm::Treated => &treated[j],
                    Arm::Control => &control[j],
                };
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for a in atoms {
                    acc += a.prob;
                    if u < acc {
                        return a.value;
                    }
                }
                atoms.last().expect("validated table").value
            }
        }
    }
}

fn effect_on_scale(treated: f64, control: f64, scale: EffectScale) -> Option<f64> {
    match scale {
        EffectScale::MeanDifference => Some(treated - control),
        EffectScale::LogRelativeRisk => {
            (treated > 0.0 && control > 0.0).then(|| treated.ln() - control.ln())
        }
    }
}

fn table_mean(atoms: &[Atom]) -> f64 {
    atoms.iter().map(|a| a.prob * a.value).sum()
}

fn table_variance(atoms: &[Atom]) -> f64 {
    let mean = table_mean(atoms);
    atoms
        .iter()
        .map(|a| a.prob * (a.value - mean).powi(2))
        .sum()
}

/// Participants drawn from a [`DgpSpec`] with a private random stream.
pub struct DgpSource<'a> {
    spec: &'a DgpSpec,
    rng: ChaCha8Rng,
}

impl<'a> DgpSource<'a> {
    pub fn new(spec: &'a DgpSpec, seed: u64) -> Self {
        DgpSource {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl OutcomeSource for DgpSource<'_> {
    fn draw(&mut self) -> PotentialOutcomes {
        self.spec.draw(&mut self.rng)
    }
}

/// SplitMix64 finalizer over `(base, replication, stream)`.
pub fn derive_seed(base: u64, replication: u64, stream: u64) -> u64 {
    let mut z = base
        ^ replication.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeds `(outcomes, assignment)` of replication `r`.
pub fn replication_seeds(base_seed: u64, r: u64) -> (u64, u64) {
    (
        derive_seed(base_seed, r, OUTCOME_STREAM),
        derive_seed(base_seed, r, ASSIGNMENT_STREAM),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub experiment: ExperimentConfig,
    pub dgp: DgpSpec,
    /// Enrollment of the first stage; later stages enroll one participant.
    #[serde(default = "mc_defaults::initial_stage")]
    pub initial_stage: usize,
    /// Stage counts `T` to report on.
    #[serde(default = "mc_defaults::stages")]
    pub stages: Vec<usize>,
    #[serde(default = "mc_defaults::designs")]
    pub designs: Vec<DesignPolicy>,
    #[serde(default = "mc_defaults::replications")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
}

mod mc_defaults {
    use crate::designs::DesignPolicy;

    pub fn initial_stage() -> usize {
        40
    }
    pub fn stages() -> Vec<usize> {
        vec![40, 100, 200, 300, 400]
    }
    pub fn designs() -> Vec<DesignPolicy> {
        vec![
            DesignPolicy::FairAdaptive,
            DesignPolicy::CompleteRandomization,
            DesignPolicy::dbcd(),
        ]
    }
    pub fn replications() -> usize {
        1000
    }
}

impl MonteCarloConfig {
    pub fn new(experiment: ExperimentConfig, dgp: DgpSpec) -> Self {
        MonteCarloConfig {
            experiment,
            dgp,
            initial_stage: mc_defaults::initial_stage(),
            stages: mc_defaults::stages(),
            designs: mc_defaults::designs(),
            replications: mc_defaults::replications(),
            base_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.dgp.validate()?;
        if self.dgp.groups() != self.experiment.m {
            return Err(Error::InvalidDgp(format!(
                "dgp has {} groups but the experiment is configured for {}",
                self.dgp.groups(),
                self.experiment.m
            )));
        }
        if self.initial_stage == 0 {
            return Err(Error::InvalidSchedule(
                "initial stage enrolls nobody".into(),
            ));
        }
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::InvalidSchedule(
                "stage grid must be nonempty and positive".into(),
            ));
        }
        if self.replications < 2 {
            return Err(Error::InvalidSchedule(
                "at least two replications are required".into(),
            ));
        }
        if self.designs.is_empty() {
            return Err(Error::InvalidDesign("no designs to compare".into()));
        }
        self.designs.iter().try_for_each(|d| d.validate())
    }

    /// Sorted, deduplicated stage grid.
    pub fn stage_grid(&self) -> Vec<usize> {
        let mut grid = self.stages.clone();
        grid.sort_unstable();
        grid.dedup();
        grid
    }

    /// Participants enrolled after `stages` stages.
    pub fn participants(&self, stages: usize) -> usize {
        self.initial_stage + stages - 1
    }
}

/// A point estimate and whether its interval covered the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatePoint {
    pub estimate: f64,
    pub covers: Option<bool>,
}

/// What one replication reports at one stage count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stages: usize,
    pub overall: Option<EstimatePoint>,
    pub groups: Vec<Option<EstimatePoint>>,
    pub treated_fraction: Vec<Option<f64>>,
}

impl Checkpoint {
    fn from_report(
        stages: usize,
        report: &InferenceReport,
        truth_overall: Option<f64>,
        truth_groups: &[Option<f64>],
    ) -> Self {
        let point = |est: &crate::engine::EffectEstimate, truth: Option<f64>| EstimatePoint {
            estimate: est.effect,
            covers: truth.map(|t| est.covers(t)),
        };
        Checkpoint {
            stages,
            overall: report.overall.as_ref().map(|e| point(e, truth_overall)),
            groups: report
                .groups
                .iter()
                .zip(truth_groups)
                .map(|(g, &t)| g.estimate.as_ref().map(|e| point(e, t)))
                .collect(),
            treated_fraction: report.groups.iter().map(|g| g.treated_fraction).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub replication: usize,
    /// One entry per stage-grid value, or the failure message.
    pub checkpoints: std::result::Result<Vec<Checkpoint>, String>,
    pub solver_nonconverged: usize,
    /// Recorded allocations that broke their own program's constraints.
    pub audit_violations: usize,
}

/// Raw per-replication results for one design, in replication order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReplicates {
    pub design: DesignPolicy,
    pub replicates: Vec<Replicate>,
}

fn run_replicate(
    cfg: &MonteCarloConfig,
    design: &DesignPolicy,
    truth: &TrueParams,
    grid: &[usize],
    r: usize,
) -> Replicate {
    let scale = cfg.experiment.effect_scale;
    let truth_groups = cfg.dgp.true_group_effects(scale);
    let truth_overall = cfg.dgp.true_overall_effect(scale);
    let (outcome_seed, assignment_seed) = replication_seeds(cfg.base_seed, r as u64);
    let mut source = DgpSource::new(&cfg.dgp, outcome_seed);
    let mut solver_nonconverged = 0;
    let mut audit_violations = 0;
    let mut run = || -> Result<Vec<Checkpoint>> {
        let mut trial = Trial::new(&cfg.experiment, design, Some(truth), assignment_seed)?;
        let mut checkpoints = Vec::with_capacity(grid.len());
        let last = *grid.last().expect("nonempty grid");
        for t in 1..=last {
            let size = if t == 1 { cfg.initial_stage } else { 1 };
            let record = trial.run_stage(size, &mut source)?;
            if record.solver_converged == Some(false) {
                solver_nonconverged += 1;
            }
            if let Some(problem) = &record.problem {
                if problem.max_violation(record.allocation.as_slice()) > AUDIT_TOL {
                    audit_violations += 1;
                }
            }
            if grid.binary_search(&t).is_ok() {
                let report = trial.report()?;
                checkpoints.push(Checkpoint::from_report(
                    t,
                    &report,
                    truth_overall,
                    &truth_groups,
                ));
            }
        }
        Ok(checkpoints)
    };
    let checkpoints = run().map_err(|e| e.to_string());
    Replicate {
        replication: r,
        checkpoints,
        solver_nonconverged,
        audit_violations,
    }
}

fn with_pool<T: Send>(parallelism: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match parallelism {
        None => Ok(job()),
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .map_err(|e| Error::InvalidDesign(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Runs every replication of every design. `parallelism` fixes the worker
/// count (`None`: rayon's default); results do not depend on it.
pub fn run_replicates(
    cfg: &MonteCarloConfig,
    parallelism: Option<usize>,
) -> Result<Vec<DesignReplicates>> {
    cfg.validate()?;
    let truth = cfg.dgp.true_params(cfg.experiment.effect_scale);
    let grid = cfg.stage_grid();
    with_pool(parallelism, || {
        cfg.designs
            .iter()
            .map(|design| DesignReplicates {
                design: *design,
                replicates: (0..cfg.replications)
                    .into_par_iter()
                    .map(|r| run_replicate(cfg, design, &truth, &grid, r))
                    .collect(),
            })
            .collect()
    })
}

/// Summary statistics of one estimand across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateStats {
    pub truth: Option<f64>,
    /// Replications where the estimate was defined.
    pub defined: usize,
    pub mean: Option<f64>,
    pub bias: Option<f64>,
    /// Sample standard deviation (divisor `n - 1`).
    pub sd: Option<f64>,
    /// Normal-theory standard error of `sd`: `sd / sqrt(2 (n - 1))`.
    pub sd_se: Option<f64>,
    pub coverage: Option<f64>,
}

impl EstimateStats {
    fn from_points(points: &[EstimatePoint], truth: Option<f64>) -> Self {
        let n = points.len();
        let values: Vec<f64> = points.iter().map(|p| p.estimate).collect();
        let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
        let sd = mean.filter(|_| n > 1).map(|mu| {
            (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        let covered: Vec<bool> = points.iter().filter_map(|p| p.covers).collect();
        EstimateStats {
            truth,
            defined: n,
            mean,
            bias: mean.zip(truth).map(|(m, t)| m - t),
            sd,
            sd_se: sd.map(|s| s / (2.0 * (n - 1) as f64).sqrt()),
            coverage: (!covered.is_empty())
                .then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: usize,
    pub estimate: EstimateStats,
    pub mean_treated_fraction: Option<f64>,
    /// Standard error of `mean_treated_fraction` across replications.
    pub treated_fraction_se: Option<f64>,
    pub oracle_allocation: f64,
    pub mean_abs_allocation_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub design: String,
    pub stages: usize,
    pub participants: usize,
    pub replications: usize,
    pub failures: usize,
    pub overall: EstimateStats,
    pub groups: Vec<GroupStats>,
    /// Median over replications of `max_j |realized_j - oracle_j|`.
    pub median_max_allocation_error: Option<f64>,
    /// `max_j - min_j` of the mean realized treated fractions.
    pub treated_fraction_spread: Option<f64>,
    pub solver_nonconverged: usize,
    pub audit_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub oracle_allocation: Vec<f64>,
    pub oracle_converged: bool,
    pub true_group_effects: Vec<Option<f64>>,
    pub true_overall_effect: Option<f64>,
    pub cells: Vec<CellSummary>,
}

impl MonteCarloSummary {
    pub fn cell(&self, design: &str, stages: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.design == design && c.stages == stages)
    }
}

fn mean_and_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    (Some(mean), se)
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Oracle allocation: the zero-slack program on the true parameters.
pub fn oracle_allocation(cfg: &MonteCarloConfig) -> Result<allocator::Solution> {
    let truth = cfg.dgp.true_params(cfg.experiment.effect_scale);
    allocator::solve(
        &truth.oracle_problem(&cfg.experiment),
        &cfg.experiment.solver,
    )
}

/// Reduces raw replicates into per-(design, stage count) summaries. Runs
/// sequentially in replication order.
pub fn summarize(cfg: &MonteCarloConfig, runs: &[DesignReplicates]) -> Result<MonteCarloSummary> {
    let scale = cfg.experiment.effect_scale;
    let oracle = oracle_allocation(cfg)?;
    let e_star = oracle.allocation.0.clone();
    let truth_groups = cfg.dgp.true_group_effects(scale);
    let truth_overall = cfg.dgp.true_overall_effect(scale);
    let m = cfg.experiment.m;
    let mut cells = Vec::new();
    for run in runs {
        let ok: Vec<&Vec<Checkpoint>> = run
            .replicates
            .iter()
            .filter_map(|r| r.checkpoints.as_ref().ok())
            .collect();
        let failures = run.replicates.len() - ok.len();
        let solver_nonconverged = run.replicates.iter().map(|r| r.solver_nonconverged).sum();
        let audit_violations = run.replicates.iter().map(|r| r.audit_violations).sum();
        for (k, &stages) in cfg.stage_grid().iter().enumerate() {
            let at: Vec<&Checkpoint> = ok.iter().map(|c| &c[k]).collect();
            let overall_points: Vec<EstimatePoint> = at.iter().filter_map(|c| c.overall).collect();
            let groups: Vec<GroupStats> = (0..m)
                .map(|j| {
                    let points: Vec<EstimatePoint> =
                        at.iter().filter_map(|c| c.groups[j]).collect();
                    let fractions: Vec<f64> =
                        at.iter().filter_map(|c| c.treated_fraction[j]).collect();
                    let (mean_fraction, fraction_se) = mean_and_se(&fractions);
                    let errors: Vec<f64> =
                        fractions.iter().map(|f| (f - e_star[j]).abs()).collect();
                    GroupStats {
                        group: j,
                        estimate: EstimateStats::from_points(&points, truth_groups[j]),
                        mean_treated_fraction: mean_fraction,
                        treated_fraction_se: fraction_se,
                        oracle_allocation: e_star[j],
                        mean_abs_allocation_error: mean_and_se(&errors).0,
                    }
                })
                .collect();
            let max_errors: Vec<f64> = at
                .iter()
                .filter_map(|c| {
                    c.treated_fraction
                        .iter()
                        .zip(&e_star)
                        .map(|(f, e)| f.map(|f| (f - e).abs()))
                        .collect::<Option<Vec<f64>>>()
                })
                .map(|errs| errs.into_iter().fold(0.0, f64::max))
                .collect();
            let fractions: Option<Vec<f64>> =
                groups.iter().map(|g| g.mean_treated_fraction).collect();
            let spread = fractions.map(|f| {
                f.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - f.iter().cloned().fold(f64::INFINITY, f64::min)
            });
            cells.push(CellSummary {
                design: run.design.name().to_string(),
                stages,
                participants: cfg.participants(stages),
                replications: run.replicates.len(),
                failures,
                overall: EstimateStats::from_points(&overall_points, truth_overall),
                groups,
                median_max_allocation_error: median(max_errors),
                treated_fraction_spread: spread,
                solver_nonconverged,
                audit_violations,
            });
        }
    }
    Ok(MonteCarloSummary {
        oracle_allocation: e_star,
        oracle_converged: oracle.converged,
        true_group_effects: truth_groups,
        true_overall_effect: truth_overall,
        cells,
    })
}

pub fn run_monte_carlo(
    cfg: &MonteCarloConfig,
    parallelism: Option<usize>,
) -> Result<MonteCarloSummary> {
    let runs = run_replicates(cfg, parallelism)?;
    summarize(cfg, &runs)
}

impl DesignReplicates {
    /// Overall estimates at the `k`-th stage-grid value, keyed by
    /// replication; `None` where the replication failed or was undefined.
    pub fn overall_estimates(&self, k: usize) -> Vec<Option<f64>> {
        self.replicates
            .iter()
            .map(|r| {
                let c = r.checkpoints.as_ref().ok()?;
                c.get(k)?.overall.map(|p| p.estimate)
            })
            .collect()
    }
}

/// Difference of sample standard deviations `sd(a) - sd(b)` over paired
/// draws, with its jackknife standard error. Pairing matters when both
/// samples come from common random numbers: the two SDs are then strongly
/// correlated and the unpaired error overstates the noise in the gap.
pub fn paired_sd_gap(a: &[f64], b: &[f64]) -> Option<(f64, f64)> {
    let n = a.len();
    if n != b.len() || n < 3 {
        return None;
    }
    let gap = sample_sd(a) - sample_sd(b);
    // Leave-one-out SDs from centered sums.
    let loo = |x: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / n as f64;
        let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let s1: f64 = c.iter().sum();
        let s2: f64 = c.iter().map(|v| v * v).sum();
        c.iter()
            .map(|&v| {
                let k = (n - 1) as f64;
                let ss = (s2 - v * v) - (s1 - v).powi(2) / k;
                (ss.max(0.0) / (k - 1.0)).sqrt()
            })
            .collect()
    };
    let thetas: Vec<f64> = loo(a).iter().zip(loo(b)).map(|(x, y)| x - y).collect();
    let mean = thetas.iter().sum::<f64>() / n as f64;
    let ss: f64 = thetas.iter().map(|t| (t - mean).powi(2)).sum();
    Some((gap, ((n - 1) as f64 / n as f64 * ss).sqrt()))
}

fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Column order of [`MonteCarloSummary::write_summary_csv`].
pub const SUMMARY_COLUMNS: [&str; 16] = [
    "design",
    "stages",
    "participants",
    "replications",
    "failures",
    "defined",
    "true_effect",
    "mean_estimate",
    "bias",
    "sd",
    "sd_se",
    "coverage",
    "median_max_alloc_error",
    "treated_fraction_spread",
    "solver_nonconverged",
    "audit_violations",
];

/// Column order of [`MonteCarloSummary::write_groups_csv`].
pub const GROUP_COLUMNS: [&str; 14] = [
    "design",
    "stages",
    "participants",
    "group",
    "defined",
    "true_effect",
    "mean_estimate",
    "bias",
    "sd",
    "coverage",
    "mean_treated_fraction",
    "treated_fraction_se",
    "oracle_allocation",
    "mean_abs_alloc_error",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MonteCarloSummary {
    /// One row per design and stage count.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SUMMARY_COLUMNS)?;
        for c in &self.cells {
            let o = &c.overall;
            w.write_record([
                c.design.clone(),
                c.stages.to_string(),
                c.participants.to_string(),
                c.replications.to_string(),
                c.failures.to_string(),
                o.defined.to_string(),
                opt(o.truth),
                opt(o.mean),
                opt(o.bias),
                opt(o.sd),
                opt(o.sd_se),
                opt(o.coverage),
                opt(c.median_max_allocation_error),
                opt(c.treated_fraction_spread),
                c.solver_nonconverged.to_string(),
                c.audit_violations.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// One row per design, stage count and group.
    pub fn write_groups_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(GROUP_COLUMNS)?;
        for c in &self.cells {
            for g in &c.groups {
                let e = &g.estimate;
                w.write_record([
                    c.design.clone(),
                    c.stages.to_string(),
                    c.participants.to_string(),
                    g.group.to_string(),
                    e.defined.to_string(),
                    opt(e.truth),
                    opt(e.mean),
                    opt(e.bias),
                    opt(e.sd),
                    opt(e.coverage),
                    opt(g.mean_treated_fraction),
                    opt(g.treated_fraction_se),
                    g.oracle_allocation.to_string(),
                    opt(g.mean_abs_allocation_error),
                ])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_dgps_validate_and_have_stated_effects() {
        let d1 = DgpSpec::dgp1();
        d1.validate().unwrap();
        assert_eq!(
            d1.true_group_effects(EffectScale::MeanDifference),
            vec![Some(-3.0), Some(2.0)]
        );
        let d2 = DgpSpec::dgp2();
        d2.validate().unwrap();
        let tau = d2.true_group_effects(EffectScale::LogRelativeRisk);
        let want = [1.7918, -0.9163, 0.0, 0.0, -1.7918];
        for (t, w) in tau.iter().zip(want) {
            assert!((t.unwrap() - w).abs() < 5e-5);
        }
        // Rounded as (1.79, -0.92, 0, 0, -1.79).
        let rounded: Vec<f64> = tau
            .iter()
            .map(|t| (t.unwrap() * 100.0).round() / 100.0)
            .collect();
        assert_eq!(rounded, vec![1.79, -0.92, 0.0, 0.0, -1.79]);
    }

    #[test]
    fn equal_arm_means_give_zero_effects() {
        let d = DgpSpec {
            proportions: vec![0.3, 0.7],
            outcomes: OutcomeModel::Gaussian {
                mean_treated: vec![1.0, -2.0],
                mean_control: vec![1.0, -2.0],
                sd_treated: vec![1.0, 2.0],
                sd_control: vec![3.0, 1.0],
            },
        };
        assert_eq!(
            d.true_group_effects(EffectScale::MeanDifference),
            vec![Some(0.0), Some(0.0)]
        );
        assert_eq!(
            d.true_group_effects(EffectScale::LogRelativeRisk),
            vec![Some(0.0), None]
        );
    }

    #[test]
    fn degenerate_bernoulli_always_one() {
        let d = DgpSpec {
            proportions: vec![1.0],
            outcomes: OutcomeModel::Bernoulli {
                mean_treated: vec![1.0],
                mean_control: vec![0.0],
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let po = d.draw(&mut rng);
            assert_eq!((po.treated, po.control), (1.0, 0.0));
        }
    }

    #[test]
    fn invalid_dgps_are_rejected() {
        let mut d = DgpSpec::dgp1();
        d.proportions = vec![0.5, 0.6];
        assert!(d.validate().is_err());
        d.proportions = vec![1.0, 0.0];
        assert!(d.validate().is_err());
        let mut d = DgpSpec::dgp2();
        if let OutcomeModel::Bernoulli { mean_treated, .. } = &mut d.outcomes {
            mean_treated[0] = 1.5;
        }
        assert!(d.validate().is_err());
        let d = DgpSpec {
            proportions: vec![1.0],
            outcomes: OutcomeModel::Table {
                treated: vec![vec![Atom {
                    value: 1.0,
                    prob: 0.5,
                }]],
                control: vec![vec![Atom {
                    value: 0.0,
                    prob: 1.0,
                }]],
            },
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn draws_match_dgp_moments() {
        let d = DgpSpec::dgp1();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let mut count0 = 0usize;
        let mut sum1 = 0.0;
        let mut sum1_sq = 0.0;
        for _ in 0..n {
            let po = d.draw(&mut rng);
            if po.group == 0 {
                count0 += 1;
                sum1 += po.treated;
                sum1_sq += po.treated * po.treated;
            }
        }
        let share = count0 as f64 / n as f64;
        assert!((share - 0.5).abs() < 0.005);
        let mean = sum1 / count0 as f64;
        let var = sum1_sq / count0 as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
        assert!((var.sqrt() - 2.5).abs() < 0.03, "{}", var.sqrt());
    }

    #[test]
    fn table_model_moments() {
        let atoms = vec![
            Atom {
                value: 0.0,
                prob: 0.25,
            },
            Atom {
                value: 4.0,
                prob: 0.75,
            },
        ];
        assert_eq!(table_mean(&atoms), 3.0);
        assert_eq!(table_variance(&atoms), 3.0);
    }

    #[test]
    fn seeds_differ_by_replication_and_stream() {
        let (a0, b0) = replication_seeds(7, 0);
        let (a1, b1) = replication_seeds(7, 1);
        assert!(a0 != b0 && a0 != a1 && b0 != b1);
        assert_eq!(replication_seeds(7, 1), (a1, b1));
        assert_ne!(replication_seeds(8, 1), (a1, b1));
    }

    #[test]
    fn sd_aggregation_two_points() {
        let pts = [
            EstimatePoint {
                estimate: 1.0,
                covers: Some(true),
            },
            EstimatePoint {
                estimate: 4.0,
                covers: Some(false),
            },
        ];
        let s = EstimateStats::from_points(&pts, Some(2.0));
        assert_eq!(s.mean, Some(2.5));
        assert_eq!(s.bias, Some(0.5));
        // Two-point sample SD: |4 - 1| / sqrt(2).
        assert!((s.sd.unwrap() - 3.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.coverage, Some(0.5));
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![3.0, 1.0, 2.0, 10.0]), Some(2.5));
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let a = [0.3, -1.2, 2.5, 0.7, 1.1, -0.4, 0.9];
        let b = [0.1, -1.0, 2.9, 0.2, 1.0, -0.8, 1.3];
        let (gap, se) = paired_sd_gap(&a, &b).unwrap();
        assert!((gap - (sample_sd(&a) - sample_sd(&b))).abs() < 1e-15);
        let n = a.len();
        let thetas: Vec<f64> = (0..n)
            .map(|i| {
                let drop = |x: &[f64]| -> Vec<f64> {
                    x.iter()
                        .enumerate()
                        .filter(|&(k, _)| k != i)
                        .map(|(_, v)| *v)
                        .collect()
                };
                sample_sd(&drop(&a)) - sample_sd(&drop(&b))
            })
            .collect();
        let mean = thetas.iter().sum::<f64>() / n as f64;
        let want = ((n - 1) as f64 / n as f64
            * thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>())
        .sqrt();
        assert!((se - want).abs() < 1e-13, "{se} vs {want}");
        // Identical samples: no gap and no noise in it.
        assert_eq!(paired_sd_gap(&a, &a), Some((0.0, 0.0)));
        assert_eq!(paired_sd_gap(&a, &b[..3]), None);
    }
}
