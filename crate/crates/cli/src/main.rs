//! `fairexp`: solve allocation problems, run single trials and Monte Carlo
//! studies from configuration files.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 solver non-convergence (outputs are still written).

mod config;
mod output;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use fairexp_core::allocator::{self, ActiveConstraint};
use fairexp_core::sim::{self, DgpSource};
use fairexp_core::{AllocationVector, InferenceReport, Trial};

use config::{ConfigError, SolveConfig, TrialConfig};
use output::{OutDir, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "fairexp", version, about = "Fair adaptive experiment engine")]
struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (`.toml` for TOML, otherwise JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory for output files.
    #[arg(long, env = "FAIREXP_OUT_DIR", default_value = "fairexp-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Solve,
    Trial,
    Montecarlo,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration file without running anything.
    Validate {
        kind: Kind,
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve one allocation problem; writes solution.json.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Run one trial; writes report.json and stages.jsonl.
    Trial {
        #[command(flatten)]
        common: Common,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a Monte Carlo study; writes summary.csv and groups.csv.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Overrides base_seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores). Does not affect results.
        #[arg(long)]
        parallelism: Option<usize>,
    },
}

enum Outcome {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Validate { kind, config } => validate(kind, &config),
        Command::Solve { common } => solve(&common),
        Command::Trial { common, seed } => trial(&common, seed),
        Command::Montecarlo {
            common,
            seed,
            parallelism,
        } => montecarlo(&common, seed, parallelism),
    }
}

fn validate(kind: Kind, path: &Path) -> anyhow::Result<Outcome> {
    match kind {
        Kind::Solve => drop(SolveConfig::load(path)?),
        Kind::Trial => drop(TrialConfig::load(path, None)?),
        Kind::Montecarlo => drop(config::load_montecarlo(path, None)?),
    }
    println!("{}: ok", path.display());
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct SolveOutput {
    allocation: AllocationVector,
    objective: f64,
    converged: bool,
    iterations: usize,
    max_violation: f64,
    active_constraints: Vec<ActiveConstraint>,
}

/// Constraints within this distance of binding are reported as active.
const ACTIVE_TOL: f64 = 1e-7;

fn solve(common: &Common) -> anyhow::Result<Outcome> {
    let started_at = output::now();
    let cfg = SolveConfig::load(&common.config)?;
    let sol = allocator::solve(&cfg.problem, &cfg.solver)?;
    let mut out = OutDir::create(&common.out_dir)?;
    out.write_json(
        "solution.json",
        &SolveOutput {
            active_constraints: cfg
                .problem
                .active_constraints(sol.allocation.as_slice(), ACTIVE_TOL),
            allocation: sol.allocation,
            objective: sol.objective,
            converged: sol.converged,
            iterations: sol.iterations,
            max_violation: sol.max_violation,
        },
    )?;
    write_manifest(&mut out, "solve", common, &cfg, None, None, started_at)?;
    Ok(if sol.converged {
        Outcome::Done
    } else {
        warn!(
            "solver stopped after {} iterations without converging",
            sol.iterations
        );
        Outcome::NotConverged
    })
}

#[derive(Serialize)]
struct TrialOutput<'a> {
    design: &'static str,
    seed: u64,
    stages: usize,
    participants: u64,
    solver_nonconverged: usize,
    true_group_effects: Vec<Option<f64>>,
    true_overall_effect: Option<f64>,
    report: &'a InferenceReport,
}

fn trial(common: &Common, seed: Option<u64>) -> anyhow::Result<Outcome> {
    let started_at = output::now();
    let cfg = TrialConfig::load(&common.config, seed)?;
    let schedule = cfg.resolved_schedule()?;
    let scale = cfg.experiment.effect_scale;
    let truth = cfg.dgp.true_params(scale);
    let (outcome_seed, assignment_seed) = sim::replication_seeds(cfg.seed, 0);

    let mut out = OutDir::create(&common.out_dir)?;
    let mut log = out.open("stages.jsonl")?;
    let mut source = DgpSource::new(&cfg.dgp, outcome_seed);
    let mut trial = Trial::new(&cfg.experiment, &cfg.design, Some(&truth), assignment_seed)?;
    let mut nonconverged = 0;
    for &size in schedule.sizes() {
        let record = trial.run_stage(size, &mut source)?;
        if record.solver_converged == Some(false) {
            nonconverged += 1;
        }
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n")?;
        log.flush()?;
    }
    drop(log);
    let report = trial.report()?;
    info!("trial finished: {} participants", report.n);
    out.write_json(
        "report.json",
        &TrialOutput {
            design: cfg.design.name(),
            seed: cfg.seed,
            stages: schedule.stages(),
            participants: report.n,
            solver_nonconverged: nonconverged,
            true_group_effects: cfg.dgp.true_group_effects(scale),
            true_overall_effect: cfg.dgp.true_overall_effect(scale),
            report: &report,
        },
    )?;
    write_manifest(
        &mut out,
        "trial",
        common,
        &cfg,
        Some(cfg.seed),
        None,
        started_at,
    )?;
    Ok(if nonconverged > 0 {
        warn!("{nonconverged} stage(s) used a non-converged allocation");
        Outcome::NotConverged
    } else {
        Outcome::Done
    })
}

fn montecarlo(
    common: &Common,
    seed: Option<u64>,
    parallelism: Option<usize>,
) -> anyhow::Result<Outcome> {
    let started_at = output::now();
    let cfg = config::load_montecarlo(&common.config, seed)?;
    if parallelism == Some(0) {
        return Err(ConfigError(anyhow::anyhow!("--parallelism must be at least 1")).into());
    }
    info!(
        "running {} replications of {} design(s)",
        cfg.replications,
        cfg.designs.len()
    );
    let summary = sim::run_monte_carlo(&cfg, parallelism).context("monte carlo run failed")?;
    let mut out = OutDir::create(&common.out_dir)?;
    let mut w = out.open("summary.csv")?;
    summary.write_summary_csv(&mut w)?;
    drop(w);
    let mut w = out.open("groups.csv")?;
    summary.write_groups_csv(&mut w)?;
    drop(w);
    write_manifest(
        &mut out,
        "montecarlo",
        common,
        &cfg,
        Some(cfg.base_seed),
        parallelism,
        started_at,
    )?;

    // Per-design counters are repeated on every stage row; read them once.
    let first = cfg.stage_grid()[0];
    let per_design = || summary.cells.iter().filter(|c| c.stages == first);
    let failures: usize = per_design().map(|c| c.failures).sum();
    if failures > 0 {
        warn!("{failures} replication(s) failed; see the failures column");
    }
    let nonconverged: usize = per_design().map(|c| c.solver_nonconverged).sum();
    Ok(if nonconverged > 0 {
        warn!("{nonconverged} allocation(s) came from a non-converged solve");
        Outcome::NotConverged
    } else {
        Outcome::Done
    })
}

fn write_manifest<T: Serialize>(
    out: &mut OutDir,
    command: &'static str,
    common: &Common,
    config: &T,
    seed: Option<u64>,
    parallelism: Option<usize>,
    started_at: String,
) -> anyhow::Result<()> {
    let manifest = RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        config_path: common.config.clone(),
        config_digest: output::config_digest(config)?,
        seed,
        parallelism,
        started_at,
        finished_at: output::now(),
        outputs: out.outputs(),
    };
    out.write_json("manifest.json", &manifest)
}
