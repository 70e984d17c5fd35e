use std::fs;

use comhom::calibrate::SupervisionMode;
use comhom::data::{generate_synth_cohort, save_dataset, GestureLabel, SynthCohortSpec};
use comhom::experiment::{aggregate, load_reports, run_experiment, DatasetSource, ExperimentConfig, ExperimentError};
use comhom::pretrain::PretrainConfig;

fn config(folds: &[u32], output: &std::path::Path) -> ExperimentConfig {
    let spec = SynthCohortSpec { subjects: 4, singles_per_class: 5, combos_per_class: 5, window_samples: 32, sample_rate_hz: 64.0, ..Default::default() };
    let pretrain = PretrainConfig { max_epochs: 1, max_steps_per_epoch: Some(2), ..Default::default() };
    ExperimentConfig::from_json(&format!(
        r#"{{"dataset": {{"synthetic": {{"spec": {}, "seed": 1}}}}, "folds": {}, "seeds": [4],
            "pretrain": {}, "n_synth_per_class": 20, "output": {}}}"#,
        serde_json::to_string(&spec).unwrap(),
        serde_json::to_string(folds).unwrap(),
        serde_json::to_string(&pretrain).unwrap(),
        serde_json::to_string(output).unwrap(),
    ))
    .unwrap()
}

#[test]
fn two_folds_one_seed_one_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&[0, 2], &dir.path().join("out"));
    let outcome = run_experiment(&cfg, 2).unwrap();
    assert_eq!(outcome.pretraining_runs, 2);
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.reports.len(), 6);

    for run in outcome.reports.chunks(3) {
        let modes: Vec<SupervisionMode> = run.iter().map(|r| r.mode).collect();
        assert_eq!(modes, SupervisionMode::ALL);
        assert!(run.iter().all(|r| r.test_digest == run[0].test_digest && r.fold == run[0].fold));
        let full = run.iter().find(|r| r.mode == SupervisionMode::Full).unwrap();
        let partial = run.iter().find(|r| r.mode == SupervisionMode::Partial).unwrap();
        assert!(full.calib_size > partial.calib_size);
    }

    let rows = aggregate(&outcome.reports);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.runs == 2));

    let out = &cfg.output;
    let hash = cfg.grid.points()[0].hash();
    for fold in [0, 2] {
        let run_dir = out.join(&hash).join(format!("{fold}-4"));
        assert!(run_dir.join("reports.json").is_file());
        assert!(run_dir.join("trace.csv").is_file());
    }
    let mut reloaded = load_reports(out).unwrap();
    reloaded.sort_by_key(|r| r.fold);
    assert_eq!(reloaded, outcome.reports);
    let acc = fs::read_to_string(out.join("aggregate/accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 4);
    assert!(acc.lines().nth(1).unwrap().contains(" ± "));
    assert!(fs::read_to_string(out.join("aggregate/summary.txt")).unwrap().contains("completed_runs=2"));
}

#[test]
fn failed_run_is_recorded_and_aggregation_proceeds() {
    // Subject 3 lacks one combination, so evaluating on it cannot score that class.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&[1, 3], &dir.path().join("out"));
    let DatasetSource::Synthetic { spec, seed } = &cfg.dataset else { unreachable!() };
    let missing = GestureLabel::from_class_index(13).unwrap();
    let data = generate_synth_cohort(spec, *seed).unwrap().filter(|w| !(w.subject == 3 && w.label == missing));
    save_dataset(&data, &dir.path().join("data")).unwrap();
    cfg.dataset = DatasetSource::Path(dir.path().join("data"));

    let outcome = run_experiment(&cfg, 1).unwrap();
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.failures[0].fold, 3);
    assert_eq!(outcome.reports.len(), 3);
    assert!(outcome.reports.iter().all(|r| r.fold == 1));
    let summary = fs::read_to_string(cfg.output.join("aggregate/summary.txt")).unwrap();
    assert!(summary.contains("completed_runs=1") && summary.contains("failed_runs=1"), "{summary}");
}

#[test]
fn unknown_fold_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&[1, 99], &dir.path().join("out"));
    assert!(matches!(run_experiment(&cfg, 1), Err(ExperimentError::Config(m)) if m.contains("99")));
}
