use std::fs;

use cead_core::experiments::{
    aggregate, aggregate_files, read_trajectory, replicate_row, run_simulations, ExperimentError, RunConfig, RunSummary,
};
use cead_core::model::Domain;
use cead_core::observables::CSV_HEADER;

const SMALL: &str = r#"
experiment = "simulate"
seed = 11
replicates = 3

[model]
b = "2 + tanh(y - x)"
theta = "1"
mutation = { family = "uniform", half_width = 1.0 }
domain = { kind = "line" }
x0 = 0.0

[scaling]
k = 20
sigma = 2e-3
t_slow = 0.05
n_obs = 50
"#;

fn run(dir: &std::path::Path) -> RunSummary {
    let cfg = RunConfig::parse(SMALL, None).unwrap();
    run_simulations(&cfg, 20, cfg.seed, dir).unwrap()
}

#[test]
fn replicate_files_have_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run(dir.path());
    assert_eq!(summary.replicates.len(), 3);
    for r in 0..3 {
        let path = dir.path().join(format!("rep_{r:03}.csv"));
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let rows = read_trajectory(&path).unwrap();
        assert_eq!(rows.len(), 51);
        assert!(rows.windows(2).all(|w| w[0].t_slow < w[1].t_slow));
        assert!(rows.windows(2).all(|w| w[0].events_so_far <= w[1].events_so_far));
    }
    assert!(dir.path().join("summary.json").exists());
    assert!(dir.path().join("timing.json").exists());
}

#[test]
fn reruns_are_bitwise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, sb) = (run(a.path()), run(b.path()));
    assert_eq!(sa, sb);
    for r in 0..3 {
        let name = format!("rep_{r:03}.csv");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
    assert_eq!(fs::read(a.path().join("summary.json")).unwrap(), fs::read(b.path().join("summary.json")).unwrap());
}

#[test]
fn summary_can_be_rebuilt_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(SMALL, None).unwrap();
    let params = cfg.scaling.as_ref().unwrap().params(20).unwrap();
    let summary = run(dir.path());
    let files: Vec<_> = (0..3).map(|r| dir.path().join(format!("rep_{r:03}.csv"))).collect();
    let rebuilt = aggregate_files(&files, &params, cfg.seed, None, Domain::Line).unwrap();
    assert_eq!(rebuilt.mean_z_end, summary.mean_z_end);
    assert_eq!(rebuilt.mean_m2_avg, summary.mean_m2_avg);
    assert_eq!(rebuilt.total_events, summary.total_events);
    assert_eq!(rebuilt.mean_sup_cead_error, None);
}

#[test]
fn identical_replicates_have_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(SMALL, None).unwrap();
    let params = cfg.scaling.as_ref().unwrap().params(20).unwrap();
    run(dir.path());
    let recs = read_trajectory(&dir.path().join("rep_000.csv")).unwrap();
    let rows: Vec<_> = (0..20).map(|i| replicate_row(i, &recs, &params, None, Domain::Line)).collect();
    let s = aggregate(&params, 0, rows, 0);
    assert_eq!(s.se_z_end, 0.0);
    assert_eq!(s.se_m2_avg, 0.0);
    assert_eq!(s.mean_z_end, recs.last().unwrap().z);
}

#[test]
fn wrong_header_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "t,z\n0,0\n").unwrap();
    assert!(matches!(read_trajectory(&path), Err(ExperimentError::Schema { .. })));
    let renamed = CSV_HEADER.replace("M2", "m2");
    fs::write(&path, format!("{renamed}\n")).unwrap();
    assert!(matches!(read_trajectory(&path), Err(ExperimentError::Schema { .. })));
}

#[test]
fn truncation_reports_budget_after_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(&SMALL.replace("n_obs = 50", "n_obs = 50\nmax_events = 10"), None).unwrap();
    let err = run_simulations(&cfg, 20, cfg.seed, dir.path()).unwrap_err();
    assert!(matches!(err, ExperimentError::Budget(3)));
    assert!(dir.path().join("summary.json").exists());
}
