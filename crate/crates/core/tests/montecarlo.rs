use fairexp_core::sim::{
    run_monte_carlo, run_replicates, summarize, GROUP_COLUMNS, SUMMARY_COLUMNS,
};
use fairexp_core::{DesignPolicy, DgpSpec, ExperimentConfig, MonteCarloConfig};

fn small(replications: usize) -> MonteCarloConfig {
    let mut cfg = MonteCarloConfig::new(ExperimentConfig::with_groups(2), DgpSpec::dgp1());
    cfg.replications = replications;
    cfg.stages = vec![40, 60];
    cfg.base_seed = 31;
    cfg
}

#[test]
fn two_replication_sd_by_hand() {
    let cfg = small(2);
    let runs = run_replicates(&cfg, Some(1)).unwrap();
    let summary = summarize(&cfg, &runs).unwrap();
    for (d, run) in runs.iter().enumerate() {
        for (k, &t) in cfg.stage_grid().iter().enumerate() {
            let est = run.overall_estimates(k);
            let (a, b) = (est[0].unwrap(), est[1].unwrap());
            let cell = summary.cell(cfg.designs[d].name(), t).unwrap();
            let sd = cell.overall.sd.unwrap();
            assert!((sd - (a - b).abs() / 2f64.sqrt()).abs() < 1e-12);
            assert!((cell.overall.mean.unwrap() - 0.5 * (a + b)).abs() < 1e-12);
            assert!((cell.overall.bias.unwrap() - (0.5 * (a + b) + 0.5)).abs() < 1e-12);
            assert_eq!(cell.participants, 40 + t - 1);
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let cfg = small(24);
    let one = run_replicates(&cfg, Some(1)).unwrap();
    let four = run_replicates(&cfg, Some(4)).unwrap();
    assert_eq!(one, four);
    assert_eq!(
        summarize(&cfg, &one).unwrap(),
        summarize(&cfg, &four).unwrap()
    );
}

#[test]
fn designs_share_participants_within_a_replication() {
    let mut cfg = small(3);
    cfg.stages = vec![1, 60];
    let runs = run_replicates(&cfg, None).unwrap();
    // Stage 1 is one-half for every design, and the coin flips come from
    // the same stream: the first-stage estimates coincide.
    let first: Vec<Vec<Option<f64>>> = runs.iter().map(|r| r.overall_estimates(0)).collect();
    assert_eq!(first[0], first[1]);
    assert_eq!(first[1], first[2]);
    assert_ne!(first[0][0], first[0][1]);
}

#[test]
fn complete_randomization_treats_half() {
    let mut cfg = small(400);
    cfg.designs = vec![DesignPolicy::CompleteRandomization];
    let s = run_monte_carlo(&cfg, None).unwrap();
    let cell = s.cell("complete_randomization", 60).unwrap();
    for g in &cell.groups {
        let mean = g.mean_treated_fraction.unwrap();
        let se = g.treated_fraction_se.unwrap();
        assert!(
            (mean - 0.5).abs() < 3.0 * se + 1e-3,
            "group {}: {mean} ± {se}",
            g.group
        );
    }
    assert_eq!(cell.failures, 0);
    assert_eq!(cell.solver_nonconverged, 0);
}

#[test]
fn csv_outputs_have_one_row_per_cell() {
    let cfg = small(5);
    let s = run_monte_carlo(&cfg, None).unwrap();
    let mut summary = Vec::new();
    s.write_summary_csv(&mut summary).unwrap();
    let mut groups = Vec::new();
    s.write_groups_csv(&mut groups).unwrap();

    let mut r = csv::Reader::from_reader(summary.as_slice());
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        SUMMARY_COLUMNS
    );
    assert_eq!(r.records().count(), 3 * 2);
    let mut r = csv::Reader::from_reader(groups.as_slice());
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        GROUP_COLUMNS
    );
    assert_eq!(r.records().count(), 3 * 2 * 2);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small(5);
    cfg.dgp = DgpSpec::dgp2();
    assert!(run_monte_carlo(&cfg, None).is_err());
    let mut cfg = small(1);
    cfg.replications = 1;
    assert!(run_monte_carlo(&cfg, None).is_err());
    let mut cfg = small(5);
    cfg.stages = vec![0];
    assert!(run_monte_carlo(&cfg, None).is_err());
}
