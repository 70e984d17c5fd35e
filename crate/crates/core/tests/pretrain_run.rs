use comhom::data::{generate_synth_cohort, split_loso, LosoSplit, SynthCohortSpec, Window};
use comhom::pretrain::{pretrain, PretrainConfig, TrainedBundle};

fn tiny_split() -> LosoSplit {
    let spec = SynthCohortSpec { subjects: 4, singles_per_class: 12, combos_per_class: 12, window_samples: 32, sample_rate_hz: 64.0, ..Default::default() };
    split_loso(&generate_synth_cohort(&spec, 11).unwrap(), 2, 0.8, 0).unwrap()
}

fn tiny_config() -> PretrainConfig {
    PretrainConfig { max_epochs: 5, patience: 5, max_steps_per_epoch: Some(10), seed: 3, ..Default::default() }
}

#[test]
fn training_loss_decreases_over_fifty_steps() {
    let split = tiny_split();
    let bundle = pretrain(&split.pre, &split.val, &tiny_config()).unwrap();
    let steps: usize = bundle.trace.iter().map(|r| r.steps).sum();
    assert_eq!(steps, 50);
    let (first, last) = (&bundle.trace[0], bundle.trace.last().unwrap());
    assert!(last.train_total < first.train_total, "train loss {} -> {}", first.train_total, last.train_total);
}

#[test]
fn pretraining_is_deterministic() {
    let split = tiny_split();
    let config = PretrainConfig { max_epochs: 2, max_steps_per_epoch: Some(3), ..tiny_config() };
    let a = pretrain(&split.pre, &split.val, &config).unwrap();
    let b = pretrain(&split.pre, &split.val, &config).unwrap();
    assert_eq!(a.trace, b.trace);
    for ((na, pa), (nb, pb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(pa.value, pb.value);
    }
}

#[test]
fn bundle_roundtrip_preserves_features() {
    let split = tiny_split();
    let config = PretrainConfig { max_epochs: 1, max_steps_per_epoch: Some(2), ..tiny_config() };
    let bundle = pretrain(&split.pre, &split.val, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    assert!(dir.path().join("trace.csv").is_file());
    let loaded = TrainedBundle::load(dir.path()).unwrap();
    assert_eq!(loaded.best_epoch, bundle.best_epoch);
    assert_eq!(loaded.trace, bundle.trace);
    assert_eq!(loaded.config, bundle.config);
    let windows: Vec<&Window> = split.test.windows.iter().collect();
    assert_eq!(loaded.encode(&windows).unwrap(), bundle.encode(&windows).unwrap());
}
